#pragma once

#include "geopix/ablation.hpp"
#include "geopix/attn_dump.hpp"
#include "geopix/checkpoint.hpp"
#include "geopix/clm.hpp"
#include "geopix/config.hpp"
#include "geopix/errors.hpp"
#include "geopix/instructgen.hpp"
#include "geopix/metrics.hpp"
#include "geopix/nn.hpp"
#include "geopix/ops.hpp"
#include "geopix/predictor.hpp"
#include "geopix/rle.hpp"
#include "geopix/scenes.hpp"
#include "geopix/tape.hpp"
#include "geopix/tensor.hpp"
#include "geopix/trainer.hpp"
