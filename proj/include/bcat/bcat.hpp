#pragma once

#include "bcat/attn_map.hpp"
#include "bcat/autodiff.hpp"
#include "bcat/bank.hpp"
#include "bcat/checkpoint.hpp"
#include "bcat/data.hpp"
#include "bcat/model.hpp"
#include "bcat/objective.hpp"
#include "bcat/ops.hpp"
#include "bcat/optim.hpp"
#include "bcat/rng.hpp"
#include "bcat/tensor.hpp"
#include "bcat/train.hpp"
