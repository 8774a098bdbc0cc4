// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "lgl2o/autodiff.hpp"
#include "lgl2o/config.hpp"
#include "lgl2o/data.hpp"
#include "lgl2o/error.hpp"
#include "lgl2o/fallback.hpp"
#include "lgl2o/guard.hpp"
#include "lgl2o/harness.hpp"
#include "lgl2o/l2o.hpp"
#include "lgl2o/meta_train.hpp"
#include "lgl2o/optimizee.hpp"
#include "lgl2o/rng.hpp"
#include "lgl2o/testbed.hpp"
