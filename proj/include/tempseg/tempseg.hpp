#pragma once

#include "tempseg/autodiff.hpp"
#include "tempseg/data.hpp"
#include "tempseg/error.hpp"
#include "tempseg/losses.hpp"
#include "tempseg/metrics.hpp"
#include "tempseg/model.hpp"
#include "tempseg/sampling.hpp"
#include "tempseg/sequence.hpp"
#include "tempseg/train.hpp"
