#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "test_util.hpp"

using namespace bcat;

namespace {

std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("bcat_ckpt_test_" + name)).string();
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

uint32_t read_u32(const std::string& b, size_t pos) {
    uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<uint8_t>(b[pos + static_cast<size_t>(i)]);
    return v;
}

void write_u32(std::string& b, size_t pos, uint32_t v) {
    for (int i = 0; i < 4; ++i) b[pos + static_cast<size_t>(i)] = static_cast<char>((v >> (8 * i)) & 0xFF);
}

// Walks the container layout independently of the decoder: magic, version,
// count, then per tensor (name_len, name, rank, dims, f64 payload).
std::string strip_tensor(const std::string& bytes, const std::string& victim) {
    std::string out = bytes.substr(0, 12);
    const uint32_t count = read_u32(bytes, 8);
    size_t pos = 12;
    uint32_t kept = 0;
    for (uint32_t i = 0; i < count; ++i) {
        const size_t start = pos;
        const uint32_t name_len = read_u32(bytes, pos);
        pos += 4;
        const std::string name = bytes.substr(pos, name_len);
        pos += name_len;
        const uint32_t rank = read_u32(bytes, pos);
        pos += 4;
        int64_t numel = 1;
        for (uint32_t r = 0; r < rank; ++r) {
            numel *= read_u32(bytes, pos);
            pos += 4;
        }
        pos += static_cast<size_t>(numel) * 8;
        if (name != victim) {
            out += bytes.substr(start, pos - start);
            ++kept;
        }
    }
    write_u32(out, 8, kept);
    return out;
}

Checkpoint sample_checkpoint(int n_blocks) {
    ModelConfig cfg;
    cfg.image_h = cfg.image_w = 16;
    cfg.patch_size = 4;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.n_blocks = n_blocks;
    cfg.mlp_ratio = 2;
    cfg.classifier_hidden = 8;
    Checkpoint ck;
    ck.params = init_model_params(cfg, 77);
    ck.n_heads = cfg.n_heads;
    ck.ref_source = testutil::random_tensor({4, 16, 16, 1}, 78, 0.5);
    for (auto& v : ck.ref_source->data) v = std::abs(v);
    MemoryBank bank = init_bank(6, cfg.n_classes, 2 * cfg.d_model);
    update_bank(bank, {0, 1, 2, 3, 4, 5}, testutil::random_tensor({6, 16}, 79),
                Tensor::full({6, 4}, 0.25), 0.0);
    ck.bank = std::move(bank);
    return ck;
}

}  // namespace

TEST_CASE("checkpoint round trip is byte-identical", "[checkpoint]") {
    const Checkpoint ck = sample_checkpoint(2);
    const std::string p1 = tmp_path("a.bckp");
    const std::string p2 = tmp_path("b.bckp");
    save_checkpoint(ck, p1);
    const Checkpoint loaded = load_checkpoint(p1);
    save_checkpoint(loaded, p2);
    CHECK(slurp(p1) == slurp(p2));

    CHECK(loaded.n_heads == ck.n_heads);
    CHECK(testutil::bitwise_equal(loaded.params.embed_w, ck.params.embed_w));
    CHECK(testutil::bitwise_equal(loaded.params.blocks[1].mlp_w2, ck.params.blocks[1].mlp_w2));
    CHECK(testutil::bitwise_equal(*loaded.ref_source, *ck.ref_source));
    CHECK(testutil::bitwise_equal(loaded.bank->features, ck.bank->features));
    CHECK(testutil::bitwise_equal(loaded.bank->probs, ck.bank->probs));
}

TEST_CASE("tensor count enumeration", "[checkpoint]") {
    // embed(2) + 12 per block + classifier(4) + meta + ref_source + bank(2)
    const Checkpoint ck = sample_checkpoint(2);
    const std::string bytes = encode_checkpoint(ck);
    int expect = 0;
    for_each_param(const_cast<ModelParams&>(ck.params), [&](const std::string&, Tensor&) { ++expect; });
    expect += 1 + 1 + 2;
    CHECK(expect == 2 + 12 * 2 + 4 + 1 + 3);
    CHECK(read_u32(bytes, 8) == static_cast<uint32_t>(expect));
}

TEST_CASE("strict loading: missing tensor is named", "[checkpoint]") {
    const std::string bytes = encode_checkpoint(sample_checkpoint(1));
    CHECK_THROWS_WITH(decode_checkpoint(strip_tensor(bytes, "cls.w2")),
                      Catch::Matchers::ContainsSubstring("missing tensor cls.w2"));
    CHECK_THROWS_WITH(decode_checkpoint(strip_tensor(bytes, "meta")),
                      Catch::Matchers::ContainsSubstring("missing tensor meta"));
    CHECK_THROWS_WITH(decode_checkpoint(strip_tensor(bytes, "bank.probs")),
                      Catch::Matchers::ContainsSubstring("bank"));
}

TEST_CASE("strict loading: unknown names rejected", "[checkpoint]") {
    std::string bytes = encode_checkpoint(sample_checkpoint(1));
    const size_t at = bytes.find("embed.w");
    REQUIRE(at != std::string::npos);
    bytes[at + 6] = 'x';  // embed.w -> embed.x
    CHECK_THROWS_WITH(decode_checkpoint(bytes), Catch::Matchers::ContainsSubstring("unknown tensor"));
}

TEST_CASE("container corruption errors", "[checkpoint]") {
    std::string bytes = encode_checkpoint(sample_checkpoint(1));
    std::string bad_magic = bytes;
    bad_magic[0] = 'Z';
    CHECK_THROWS_WITH(decode_checkpoint(bad_magic), Catch::Matchers::ContainsSubstring("bad magic"));

    std::string bad_version = bytes;
    bad_version[4] = 9;
    CHECK_THROWS_WITH(decode_checkpoint(bad_version), Catch::Matchers::ContainsSubstring("version"));

    CHECK_THROWS_WITH(decode_checkpoint(bytes.substr(0, bytes.size() - 3)),
                      Catch::Matchers::ContainsSubstring("truncated"));
}

TEST_CASE("shape validation against the implied model", "[checkpoint]") {
    Checkpoint ck = sample_checkpoint(1);
    ck.params.cls_b2 = Tensor({7});  // disagrees with cls.w2's class count
    CHECK_THROWS_WITH(decode_checkpoint(encode_checkpoint(ck)), Catch::Matchers::ContainsSubstring("cls.b2"));
}

TEST_CASE("model geometry reconstruction", "[checkpoint]") {
    const Checkpoint ck = sample_checkpoint(2);
    const ModelConfig cfg = config_from_checkpoint(ck, 16, 16, 1);
    CHECK(cfg.patch_size == 4);
    CHECK(cfg.d_model == 8);
    CHECK(cfg.n_heads == 2);
    CHECK(cfg.n_blocks == 2);
    CHECK(cfg.mlp_ratio == 2);
    CHECK(cfg.n_classes == 4);
    CHECK(cfg.classifier_hidden == 8);
}

TEST_CASE("source-free load policy skips ref_source", "[checkpoint]") {
    const std::string path = tmp_path("dtf.bckp");
    save_checkpoint(sample_checkpoint(1), path);
    const Checkpoint full = load_checkpoint(path, true);
    CHECK(full.ref_source.has_value());
    CHECK(full.loaded_names.count("ref_source") == 1);

    const Checkpoint dtf = load_checkpoint(path, false);
    CHECK(!dtf.ref_source.has_value());
    CHECK(dtf.loaded_names.count("ref_source") == 0);
    CHECK(dtf.loaded_names.count("embed.w") == 1);
}

TEST_CASE("student checkpoints carry no source data", "[checkpoint]") {
    Checkpoint student = sample_checkpoint(1);
    student.ref_source.reset();
    student.bank.reset();
    const std::string bytes = encode_checkpoint(student);
    CHECK(bytes.find("ref_source") == std::string::npos);
    CHECK(bytes.find("bank.") == std::string::npos);
    const Checkpoint loaded = decode_checkpoint(bytes);
    CHECK(!loaded.ref_source.has_value());
    CHECK(!loaded.bank.has_value());
}
