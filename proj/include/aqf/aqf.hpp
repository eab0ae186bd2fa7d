#pragma once

// Umbrella header for the aqf library.

#include "aqf/autodiff.hpp"
#include "aqf/baselines.hpp"
#include "aqf/commands.hpp"
#include "aqf/config.hpp"
#include "aqf/data.hpp"
#include "aqf/evaluation.hpp"
#include "aqf/flow.hpp"
#include "aqf/forecasting.hpp"
#include "aqf/heads.hpp"
#include "aqf/nn.hpp"
#include "aqf/optim.hpp"
#include "aqf/root_finding.hpp"
#include "aqf/scoring.hpp"
#include "aqf/special.hpp"
#include "aqf/training.hpp"
#include "aqf/transformers.hpp"
#include "aqf/verify.hpp"
