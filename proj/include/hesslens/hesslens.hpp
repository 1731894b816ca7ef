#pragma once

#include "hesslens/analysis.hpp"
#include "hesslens/autodiff.hpp"
#include "hesslens/curvature.hpp"
#include "hesslens/data.hpp"
#include "hesslens/derivatives.hpp"
#include "hesslens/errors.hpp"
#include "hesslens/hashing.hpp"
#include "hesslens/linear_operator.hpp"
#include "hesslens/models.hpp"
#include "hesslens/param_vector.hpp"
#include "hesslens/random.hpp"
#include "hesslens/spectral.hpp"
#include "hesslens/tensor.hpp"
#include "hesslens/training.hpp"
