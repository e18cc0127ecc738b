#pragma once

#include "ssmcond/bench.hpp"
#include "ssmcond/gradcheck.hpp"
#include "ssmcond/inference.hpp"
#include "ssmcond/model.hpp"
#include "ssmcond/streaming.hpp"
#include "ssmcond/train.hpp"
