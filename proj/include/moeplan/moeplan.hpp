// Umbrella header: pulls in the whole deployment-planning toolkit.
#pragma once

#include "moeplan/bo_tuner.hpp"
#include "moeplan/config.hpp"
#include "moeplan/core.hpp"
#include "moeplan/cost_model.hpp"
#include "moeplan/csv.hpp"
#include "moeplan/feature_table.hpp"
#include "moeplan/planner.hpp"
#include "moeplan/predictor.hpp"
#include "moeplan/rng.hpp"
#include "moeplan/simulator.hpp"
#include "moeplan/workload.hpp"
