#pragma once

#include "csmpu/data.hpp"
#include "csmpu/io.hpp"
#include "csmpu/matrix.hpp"
#include "csmpu/metrics.hpp"
#include "csmpu/model.hpp"
#include "csmpu/objective.hpp"
#include "csmpu/prior.hpp"
#include "csmpu/risk.hpp"
#include "csmpu/serialize.hpp"
#include "csmpu/surrogate.hpp"
#include "csmpu/train.hpp"
