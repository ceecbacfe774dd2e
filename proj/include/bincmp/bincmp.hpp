#pragma once

#include "bincmp/cmp.hpp"
#include "bincmp/config.hpp"
#include "bincmp/count_dist.hpp"
#include "bincmp/error.hpp"
#include "bincmp/inference.hpp"
#include "bincmp/io.hpp"
#include "bincmp/likelihood.hpp"
#include "bincmp/model.hpp"
#include "bincmp/numeric.hpp"
#include "bincmp/parallel.hpp"
#include "bincmp/rng.hpp"
#include "bincmp/run.hpp"
#include "bincmp/sampler.hpp"
#include "bincmp/simgen.hpp"
#include "bincmp/spatial.hpp"
