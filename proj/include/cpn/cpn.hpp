#pragma once

#include "cpn/ablation.hpp"
#include "cpn/checkpoint.hpp"
#include "cpn/dataio.hpp"
#include "cpn/episodes.hpp"
#include "cpn/error.hpp"
#include "cpn/eval.hpp"
#include "cpn/gradcheck.hpp"
#include "cpn/gradcore.hpp"
#include "cpn/model.hpp"
#include "cpn/rng.hpp"
#include "cpn/synthgen.hpp"
#include "cpn/training.hpp"
