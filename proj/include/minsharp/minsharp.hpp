#pragma once

#include "minsharp/checkpoint.hpp"
#include "minsharp/checks.hpp"
#include "minsharp/dataset.hpp"
#include "minsharp/errors.hpp"
#include "minsharp/experiment.hpp"
#include "minsharp/hessian.hpp"
#include "minsharp/linalg.hpp"
#include "minsharp/network.hpp"
#include "minsharp/normalized.hpp"
#include "minsharp/parallel.hpp"
#include "minsharp/sharpness.hpp"
#include "minsharp/stats.hpp"
