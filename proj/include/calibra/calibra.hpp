#pragma once

#include "calibra/errors.hpp"
#include "calibra/qa.hpp"
#include "calibra/metrics.hpp"
#include "calibra/backend.hpp"
#include "calibra/confidence.hpp"
#include "calibra/strategies.hpp"
#include "calibra/concern.hpp"
#include "calibra/harness.hpp"
