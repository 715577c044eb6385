#pragma once

#include "curriculum.hpp"
#include "distill.hpp"
#include "env.hpp"
#include "errors.hpp"
#include "metrics.hpp"
#include "policy.hpp"
#include "replay.hpp"
#include "rng.hpp"
#include "runtime.hpp"
