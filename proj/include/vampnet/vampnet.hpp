#pragma once

#include "vampnet/baseline.hpp"
#include "vampnet/dataset.hpp"
#include "vampnet/errors.hpp"
#include "vampnet/experiment.hpp"
#include "vampnet/koopman.hpp"
#include "vampnet/linalg.hpp"
#include "vampnet/network.hpp"
#include "vampnet/rng.hpp"
#include "vampnet/simulate.hpp"
#include "vampnet/trajectory.hpp"
#include "vampnet/vamp.hpp"
