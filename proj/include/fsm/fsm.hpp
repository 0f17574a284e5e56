#pragma once

#include "fsm/assign.hpp"
#include "fsm/balance.hpp"
#include "fsm/csv.hpp"
#include "fsm/data.hpp"
#include "fsm/error.hpp"
#include "fsm/harness.hpp"
#include "fsm/inference.hpp"
#include "fsm/linalg.hpp"
#include "fsm/rng.hpp"
#include "fsm/som.hpp"
#include "fsm/stats.hpp"
