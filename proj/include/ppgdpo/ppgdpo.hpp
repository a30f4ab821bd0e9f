#pragma once

#include "ppgdpo/linalg.hpp"
#include "ppgdpo/rng.hpp"
#include "ppgdpo/parallel.hpp"
#include "ppgdpo/market.hpp"
#include "ppgdpo/reference.hpp"
#include "ppgdpo/jet.hpp"
#include "ppgdpo/policy.hpp"
#include "ppgdpo/simulator.hpp"
#include "ppgdpo/adjoint.hpp"
#include "ppgdpo/stage1.hpp"
#include "ppgdpo/stage2.hpp"
#include "ppgdpo/distill.hpp"
#include "ppgdpo/ppo.hpp"
#include "ppgdpo/io.hpp"
#include "ppgdpo/harness.hpp"
