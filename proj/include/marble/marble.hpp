// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "marble/types.hpp"
#include "marble/simplex_qp.hpp"
#include "marble/advantage.hpp"
#include "marble/velocity_model.hpp"
#include "marble/nft.hpp"
#include "marble/harmonizer.hpp"
#include "marble/toy_env.hpp"
#include "marble/ddp_sim.hpp"
#include "marble/diagnostics.hpp"
#include "marble/checks.hpp"
#include "marble/experiment.hpp"
