#pragma once

#include "fbsde/adjoint.hpp"
#include "fbsde/affine_model.hpp"
#include "fbsde/condexp.hpp"
#include "fbsde/control.hpp"
#include "fbsde/errors.hpp"
#include "fbsde/hamiltonian.hpp"
#include "fbsde/maxprinciple.hpp"
#include "fbsde/model.hpp"
#include "fbsde/optimizer.hpp"
#include "fbsde/picard.hpp"
#include "fbsde/regression.hpp"
#include "fbsde/rng.hpp"
#include "fbsde/scenario.hpp"
#include "fbsde/state_solver.hpp"
#include "fbsde/variational.hpp"
#include "fbsde/benchmarks.hpp"
