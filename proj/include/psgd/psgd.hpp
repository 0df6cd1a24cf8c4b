#pragma once

#include "psgd/config.hpp"
#include "psgd/cost_model.hpp"
#include "psgd/data_feed.hpp"
#include "psgd/error.hpp"
#include "psgd/harness.hpp"
#include "psgd/optimizer.hpp"
#include "psgd/problems.hpp"
#include "psgd/rng.hpp"
#include "psgd/run_result.hpp"
#include "psgd/simulator.hpp"
#include "psgd/strategies.hpp"
#include "psgd/tensor.hpp"
#include "psgd/threaded.hpp"
#include "psgd/topology.hpp"
