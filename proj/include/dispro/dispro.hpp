// SPDX-License-Identifier: Apache-2.0
// Umbrella header.
#pragma once

#include "dispro/autodiff.hpp"
#include "dispro/checkpoint.hpp"
#include "dispro/cohort.hpp"
#include "dispro/cohort_io.hpp"
#include "dispro/config.hpp"
#include "dispro/core.hpp"
#include "dispro/encoders.hpp"
#include "dispro/harness.hpp"
#include "dispro/label.hpp"
#include "dispro/multipro.hpp"
#include "dispro/optim.hpp"
#include "dispro/state.hpp"
#include "dispro/survival.hpp"
#include "dispro/unipro.hpp"
