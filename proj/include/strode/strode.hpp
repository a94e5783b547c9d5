#pragma once

// Umbrella header: the full library in dependency order.

#include "strode/errors.hpp"
#include "strode/rng.hpp"
#include "strode/autodiff.hpp"
#include "strode/nn.hpp"
#include "strode/ode.hpp"
#include "strode/point_process.hpp"
#include "strode/datagen.hpp"
#include "strode/metrics.hpp"
#include "strode/model.hpp"
