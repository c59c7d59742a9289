#pragma once

#include "netoutlier/error.hpp"
#include "netoutlier/linalg.hpp"
#include "netoutlier/graph.hpp"
#include "netoutlier/robust_stats.hpp"
#include "netoutlier/model.hpp"
#include "netoutlier/edgewise_mcd.hpp"
#include "netoutlier/sim_bench.hpp"
#include "netoutlier/coda.hpp"
#include "netoutlier/io.hpp"
