#pragma once

#include "metafit/covstruct.hpp"
#include "metafit/csv.hpp"
#include "metafit/data.hpp"
#include "metafit/error.hpp"
#include "metafit/formula.hpp"
#include "metafit/gaussian.hpp"
#include "metafit/glmm.hpp"
#include "metafit/inference.hpp"
#include "metafit/optimize.hpp"
#include "metafit/rng.hpp"
#include "metafit/simbench.hpp"
