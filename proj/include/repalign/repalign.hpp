#pragma once

#include "condition.hpp"
#include "equivariance.hpp"
#include "error.hpp"
#include "feature_store.hpp"
#include "kernel_align.hpp"
#include "matrix.hpp"
#include "oracle.hpp"
#include "pipeline.hpp"
#include "profiler.hpp"
#include "random.hpp"
