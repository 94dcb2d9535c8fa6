#pragma once

#include "odtr/common.hpp"
#include "odtr/dataset.hpp"
#include "odtr/dr_longitudinal.hpp"
#include "odtr/dr_single.hpp"
#include "odtr/learners.hpp"
#include "odtr/policy_eval.hpp"
#include "odtr/rules.hpp"
#include "odtr/sim.hpp"
