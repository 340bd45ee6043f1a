#pragma once

#include "clustercal/calibration.hpp"
#include "clustercal/data_model.hpp"
#include "clustercal/diagnostics.hpp"
#include "clustercal/error.hpp"
#include "clustercal/estimators.hpp"
#include "clustercal/json_io.hpp"
#include "clustercal/parallel.hpp"
#include "clustercal/rng.hpp"
#include "clustercal/simulation.hpp"
#include "clustercal/working_models.hpp"
