// bcat command line: data generation, training, evaluation, distillation and
// attention-map export. Machine-readable JSON goes to stdout, human logs to
// stderr; every command is deterministic given its arguments and config.

#include <filesystem>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "bcat/bcat.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json default_config_json() {
    const bcat::TrainConfig d;
    return json{
        {"seed", d.seed},
        {"epochs", d.epochs},
        {"batch_size", d.batch_size},
        {"optimizer", d.optimizer == bcat::OptimizerKind::adamw ? "adamw" : "sgd_momentum"},
        {"lr", d.lr},
        {"momentum", d.momentum},
        {"weight_decay", nullptr},
        {"alpha", d.alpha},
        {"beta", d.beta},
        {"temperature", d.temperature},
        {"epsilon", nullptr},
        {"k_neighbors", d.k_neighbors},
        {"bank_momentum", d.bank_momentum},
        {"source_only", d.source_only},
        {"model",
         {{"image_h", d.model.image_h},
          {"image_w", d.model.image_w},
          {"channels", d.model.channels},
          {"patch_size", d.model.patch_size},
          {"d_model", d.model.d_model},
          {"n_heads", d.model.n_heads},
          {"n_blocks", d.model.n_blocks},
          {"mlp_ratio", d.model.mlp_ratio},
          {"n_classes", d.model.n_classes},
          {"classifier_hidden", d.model.classifier_hidden}}},
        {"data", {{"source", nullptr}, {"target", nullptr}}},
        {"out_dir", "."},
    };
}

// Overlay user keys onto the defaults; unknown keys are fatal.
void merge_config(json& base, const json& user, const std::string& prefix) {
    if (!user.is_object()) throw std::runtime_error("config: expected an object at " + (prefix.empty() ? "top level" : prefix));
    for (const auto& [key, value] : user.items()) {
        const std::string path = prefix.empty() ? key : prefix + "." + key;
        if (!base.contains(key)) throw std::runtime_error("config: unknown key \"" + path + "\"");
        if (base[key].is_object() && !base[key].is_null()) {
            merge_config(base[key], value, path);
        } else {
            base[key] = value;
        }
    }
}

void apply_override(json& cfg, const std::string& kv) {
    const size_t eq = kv.find('=');
    if (eq == std::string::npos) throw std::runtime_error("override: expected key=value, got \"" + kv + "\"");
    const std::string key = kv.substr(0, eq);
    const std::string raw = kv.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::exception&) {
        value = raw;  // bare strings, e.g. optimizer=adamw
    }
    json* node = &cfg;
    size_t pos = 0;
    for (;;) {
        const size_t dot = key.find('.', pos);
        const std::string part = key.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
        if (!node->contains(part)) throw std::runtime_error("override: unknown key \"" + key + "\"");
        if (dot == std::string::npos) {
            (*node)[part] = value;
            return;
        }
        node = &(*node)[part];
        pos = dot + 1;
    }
}

template <typename T>
T require_number(const json& j, const std::string& key) {
    if (!j.at(key).is_number()) throw std::runtime_error("config: \"" + key + "\" must be a number");
    return j.at(key).get<T>();
}

bcat::TrainConfig parse_train_config(const json& j) {
    bcat::TrainConfig c;
    c.seed = require_number<uint64_t>(j, "seed");
    c.epochs = require_number<int>(j, "epochs");
    c.batch_size = require_number<int>(j, "batch_size");
    const std::string opt = j.at("optimizer").get<std::string>();
    if (opt == "adamw")
        c.optimizer = bcat::OptimizerKind::adamw;
    else if (opt == "sgd_momentum")
        c.optimizer = bcat::OptimizerKind::sgd_momentum;
    else
        throw std::runtime_error("config: optimizer must be \"sgd_momentum\" or \"adamw\", got \"" + opt + "\"");
    c.lr = require_number<double>(j, "lr");
    c.momentum = require_number<double>(j, "momentum");
    if (!j.at("weight_decay").is_null()) c.weight_decay = require_number<double>(j, "weight_decay");
    c.alpha = require_number<double>(j, "alpha");
    c.beta = require_number<double>(j, "beta");
    c.temperature = require_number<double>(j, "temperature");
    if (!j.at("epsilon").is_null()) c.epsilon_fixed = require_number<double>(j, "epsilon");
    c.k_neighbors = require_number<int>(j, "k_neighbors");
    c.bank_momentum = require_number<double>(j, "bank_momentum");
    c.source_only = j.at("source_only").get<bool>();
    const json& m = j.at("model");
    c.model.image_h = require_number<int>(m, "image_h");
    c.model.image_w = require_number<int>(m, "image_w");
    c.model.channels = require_number<int>(m, "channels");
    c.model.patch_size = require_number<int>(m, "patch_size");
    c.model.d_model = require_number<int>(m, "d_model");
    c.model.n_heads = require_number<int>(m, "n_heads");
    c.model.n_blocks = require_number<int>(m, "n_blocks");
    c.model.mlp_ratio = require_number<int>(m, "mlp_ratio");
    c.model.n_classes = require_number<int>(m, "n_classes");
    c.model.classifier_hidden = require_number<int>(m, "classifier_hidden");
    c.validate();
    return c;
}

json load_config(const std::string& path, const std::vector<std::string>& overrides) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    json user;
    try {
        user = json::parse(in);
    } catch (const json::exception& e) {
        throw std::runtime_error("config: " + path + " is not valid JSON: " + e.what());
    }
    json cfg = default_config_json();
    merge_config(cfg, user, "");
    for (const auto& kv : overrides) apply_override(cfg, kv);
    return cfg;
}

// Resolved copy with the effective weight decay filled in.
json resolved_config(const json& cfg, const bcat::TrainConfig& tc) {
    json out = cfg;
    out["weight_decay"] = tc.effective_weight_decay();
    return out;
}

std::string require_data_path(const json& cfg, const char* which) {
    const json& node = cfg.at("data").at(which);
    if (!node.is_string())
        throw std::runtime_error(std::string("config: data.") + which + " must be a dataset path");
    const std::string path = node.get<std::string>();
    if (!fs::exists(path)) throw std::runtime_error(std::string("config: dataset not found: ") + path);
    return path;
}

void write_text(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out << content;
}

json class_histogram(const bcat::Dataset& d, int n_classes) {
    std::vector<int64_t> hist(static_cast<size_t>(n_classes), 0);
    for (int y : d.labels) hist[static_cast<size_t>(y)]++;
    return json(hist);
}

json eval_to_json(const bcat::EvalResult& r, const std::string& mode) {
    return json{{"mode", mode}, {"n", r.n}, {"accuracy", r.accuracy}, {"per_class", r.per_class}};
}

// ------------------------------------------------------------------ commands

int cmd_gen_data(const std::string& preset, const std::string& shift_json, int n, uint64_t seed,
                 const std::string& out_path) {
    bcat::ShiftParams shift;
    bcat::DomainTag tag = bcat::DomainTag::source;
    if (!shift_json.empty()) {
        const json j = json::parse(shift_json);
        json base = {{"fg", shift.fg}, {"bg", shift.bg}, {"sigma", shift.sigma}, {"max_translation", shift.max_translation}};
        merge_config(base, j, "shift");
        shift.fg = base["fg"].get<double>();
        shift.bg = base["bg"].get<double>();
        shift.sigma = base["sigma"].get<double>();
        shift.max_translation = base["max_translation"].get<int>();
    } else if (preset == "source") {
        shift = bcat::source_preset();
    } else if (preset == "target") {
        shift = bcat::target_preset();
        tag = bcat::DomainTag::target;
    } else {
        throw std::runtime_error("gen-data: preset must be \"source\" or \"target\" (or pass --shift-json)");
    }
    const bcat::Dataset d = bcat::gen_shifted_shapes(n, shift, seed, tag);
    bcat::save_dataset(d, out_path);
    std::cout << json{{"n", d.size()}, {"histogram", class_histogram(d, bcat::kShapeClasses)}, {"out", out_path}}.dump()
              << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides) {
    const json cfg_json = load_config(config_path, overrides);
    const bcat::TrainConfig cfg = parse_train_config(cfg_json);
    const std::string src_path = require_data_path(cfg_json, "source");
    const std::string tgt_path = require_data_path(cfg_json, "target");
    const std::string out_dir = cfg_json.at("out_dir").get<std::string>();
    fs::create_directories(out_dir);
    write_text(out_dir + "/config.resolved.json", resolved_config(cfg_json, cfg).dump(2) + "\n");

    const bcat::Dataset source = bcat::load_dataset(src_path, bcat::DomainTag::source);
    const bcat::Dataset target = bcat::load_dataset(tgt_path, bcat::DomainTag::target);
    bcat::TrainResult result = bcat::train_bcat(source, target, cfg);
    for (const auto& m : result.metrics) {
        std::cerr << "epoch " << m.epoch << ": total " << m.loss_total << " (cls_s " << m.loss_cls_s << ", cls_t "
                  << m.loss_cls_t << ", mmd " << m.mmd << ", eps " << m.epsilon << ")";
        if (m.target_acc) std::cerr << " target_acc " << *m.target_acc;
        std::cerr << "\n";
    }

    bcat::Checkpoint ck;
    ck.params = std::move(result.params);
    ck.n_heads = cfg.model.n_heads;
    ck.ref_source = std::move(result.ref_source);
    ck.bank = std::move(result.bank);
    const std::string ck_path = out_dir + "/model.bckp";
    bcat::save_checkpoint(ck, ck_path);
    write_text(out_dir + "/metrics.jsonl", bcat::metrics_jsonl(result.metrics));

    json summary{{"checkpoint", ck_path}, {"metrics", out_dir + "/metrics.jsonl"}, {"epochs", cfg.epochs}};
    if (!result.metrics.empty() && result.metrics.back().target_acc)
        summary["final_target_acc"] = *result.metrics.back().target_acc;
    std::cout << summary.dump() << "\n";
    return 0;
}

int cmd_eval(const std::string& ck_path, const std::string& data_path, const std::string& mode) {
    if (mode != "full" && mode != "dtf") throw std::runtime_error("eval: mode must be \"full\" or \"dtf\"");
    const bcat::Checkpoint ck = bcat::load_checkpoint(ck_path, /*materialize_ref_source=*/mode == "full");
    const bcat::Dataset data = bcat::load_dataset(data_path, bcat::DomainTag::target);
    if (!data.has_labels()) throw std::runtime_error("eval: dataset " + data_path + " has no labels");
    const bcat::ModelConfig mc =
        bcat::config_from_checkpoint(ck, data.images.dim(1), data.images.dim(2), data.images.dim(3));
    bcat::EvalResult r;
    if (mode == "full") {
        if (!ck.ref_source) throw std::runtime_error("eval: checkpoint has no ref_source; full mode needs one");
        r = bcat::evaluate_dataset(ck.params, mc.n_heads, mc.patch_size, data, bcat::InferMode::full,
                                   &*ck.ref_source, mc.n_classes);
    } else {
        r = bcat::evaluate_dataset(ck.params, mc.n_heads, mc.patch_size, data, bcat::InferMode::dtf, nullptr,
                                   mc.n_classes);
    }
    std::cout << eval_to_json(r, mode).dump() << "\n";
    return 0;
}

int cmd_distill(const std::string& teacher_path, const std::string& data_path, const std::string& config_path,
                const std::vector<std::string>& overrides) {
    const json cfg_json = load_config(config_path, overrides);
    const bcat::TrainConfig cfg = parse_train_config(cfg_json);
    const std::string out_dir = cfg_json.at("out_dir").get<std::string>();
    fs::create_directories(out_dir);
    write_text(out_dir + "/distill_config.resolved.json", resolved_config(cfg_json, cfg).dump(2) + "\n");

    const bcat::Checkpoint teacher = bcat::load_checkpoint(teacher_path);
    const bcat::Dataset target = bcat::load_dataset(data_path, bcat::DomainTag::target);
    bcat::DistillResult result = bcat::distill_student(teacher, target, cfg);
    for (const auto& m : result.metrics) {
        std::cerr << "distill epoch " << m.epoch << ": kd " << m.loss_kd << " eps " << m.epsilon;
        if (m.target_acc) std::cerr << " target_acc " << *m.target_acc;
        std::cerr << "\n";
    }

    bcat::Checkpoint student;
    student.params = std::move(result.params);
    student.n_heads = teacher.n_heads;
    const std::string ck_path = out_dir + "/student.bckp";
    bcat::save_checkpoint(student, ck_path);
    write_text(out_dir + "/distill_metrics.jsonl", bcat::distill_metrics_jsonl(result.metrics));

    json summary{{"student", ck_path}, {"metrics", out_dir + "/distill_metrics.jsonl"}};
    if (!result.metrics.empty() && result.metrics.back().target_acc)
        summary["final_target_acc"] = *result.metrics.back().target_acc;
    std::cout << summary.dump() << "\n";
    return 0;
}

int cmd_attn_map(const std::string& ck_path, const std::string& data_path, int sample, int block,
                 const std::string& head, const std::string& out_path) {
    const bcat::Checkpoint ck = bcat::load_checkpoint(ck_path, /*materialize_ref_source=*/false);
    const bcat::Dataset data = bcat::load_dataset(data_path, bcat::DomainTag::target);
    const bcat::ModelConfig mc =
        bcat::config_from_checkpoint(ck, data.images.dim(1), data.images.dim(2), data.images.dim(3));
    bcat::AttnMapRequest req;
    req.sample = sample;
    req.block = block;
    if (head == "mean") {
        req.head = -1;
    } else {
        try {
            req.head = std::stoi(head);
        } catch (const std::exception&) {
            throw std::runtime_error("attn-map: --head must be an integer or \"mean\"");
        }
    }
    const auto pixels = bcat::render_attn_map(ck.params, mc, data.images, req);
    bcat::write_pgm(out_path, mc.image_w, mc.image_h, pixels);
    std::cout << json{{"out", out_path}, {"width", mc.image_w}, {"height", mc.image_h}}.dump() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"bidirectional cross-attention domain adaptation lab"};
    app.require_subcommand(1);

    std::string preset, shift_json, out_path, config_path, ck_path, data_path, mode = "full", head = "mean";
    std::vector<std::string> overrides;
    int n = 0, sample = 0, block = 0;
    uint64_t seed = 1;

    auto* gen = app.add_subcommand("gen-data", "generate a ShiftedShapes dataset (BCDS)");
    gen->add_option("--preset", preset, "source | target");
    gen->add_option("--shift-json", shift_json, "explicit shift parameters as JSON");
    gen->add_option("--n", n, "number of samples")->required()->check(CLI::PositiveNumber);
    gen->add_option("--seed", seed, "generator seed");
    gen->add_option("--out", out_path, "output .bcds path")->required();

    auto* train = app.add_subcommand("train", "train on a source/target dataset pair");
    train->add_option("--config", config_path, "JSON config path")->required();
    train->add_option("--override", overrides, "key=value config overrides (dotted paths)");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a labeled dataset");
    eval->add_option("--checkpoint", ck_path, "model checkpoint (.bckp)")->required();
    eval->add_option("--data", data_path, "dataset (.bcds)")->required();
    eval->add_option("--mode", mode, "full | dtf");

    auto* distill = app.add_subcommand("distill", "distill a source-free student from a trained checkpoint");
    distill->add_option("--teacher", ck_path, "teacher checkpoint (.bckp)")->required();
    distill->add_option("--data", data_path, "target dataset (.bcds)")->required();
    distill->add_option("--config", config_path, "JSON config path")->required();
    distill->add_option("--override", overrides, "key=value config overrides");

    auto* amap = app.add_subcommand("attn-map", "export one sample's attention map as PGM");
    amap->add_option("--checkpoint", ck_path, "model checkpoint (.bckp)")->required();
    amap->add_option("--data", data_path, "dataset (.bcds)")->required();
    amap->add_option("--sample", sample, "sample index");
    amap->add_option("--block", block, "block index");
    amap->add_option("--head", head, "head index or \"mean\"");
    amap->add_option("--out", out_path, "output .pgm path")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_data(preset, shift_json, n, seed, out_path);
        if (train->parsed()) return cmd_train(config_path, overrides);
        if (eval->parsed()) return cmd_eval(ck_path, data_path, mode);
        if (distill->parsed()) return cmd_distill(ck_path, data_path, config_path, overrides);
        if (amap->parsed()) return cmd_attn_map(ck_path, data_path, sample, block, head, out_path);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
