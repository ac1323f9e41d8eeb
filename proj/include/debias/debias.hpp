// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "debias/checkpoint.hpp"
#include "debias/config.hpp"
#include "debias/data.hpp"
#include "debias/diagnostics.hpp"
#include "debias/error.hpp"
#include "debias/metrics.hpp"
#include "debias/nn.hpp"
#include "debias/sampling.hpp"
#include "debias/schedule.hpp"
#include "debias/training.hpp"
#include "debias/types.hpp"
#include "debias/weighting.hpp"
