#pragma once

#include "stochca/analysis.hpp"
#include "stochca/attention.hpp"
#include "stochca/baselines.hpp"
#include "stochca/checkpoint.hpp"
#include "stochca/config.hpp"
#include "stochca/datagen.hpp"
#include "stochca/harness.hpp"
#include "stochca/instrument.hpp"
#include "stochca/ops.hpp"
#include "stochca/optim.hpp"
#include "stochca/rng.hpp"
#include "stochca/stochca.hpp"
#include "stochca/tape.hpp"
#include "stochca/tensor.hpp"
#include "stochca/training.hpp"
#include "stochca/vit.hpp"
