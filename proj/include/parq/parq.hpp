#pragma once

#include "parq/basis.hpp"
#include "parq/config.hpp"
#include "parq/cost.hpp"
#include "parq/diagnostics.hpp"
#include "parq/harness.hpp"
#include "parq/io.hpp"
#include "parq/learner.hpp"
#include "parq/linalg.hpp"
#include "parq/oracle.hpp"
#include "parq/policy.hpp"
#include "parq/rng.hpp"
#include "parq/system.hpp"
