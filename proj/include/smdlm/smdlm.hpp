#pragma once

#include "smdlm/backbone.hpp"
#include "smdlm/checkpoint.hpp"
#include "smdlm/cli.hpp"
#include "smdlm/common.hpp"
#include "smdlm/config.hpp"
#include "smdlm/corpus.hpp"
#include "smdlm/decoding.hpp"
#include "smdlm/eval.hpp"
#include "smdlm/parallel.hpp"
#include "smdlm/schedule.hpp"
#include "smdlm/soft_input.hpp"
#include "smdlm/soft_mask.hpp"
#include "smdlm/training.hpp"
