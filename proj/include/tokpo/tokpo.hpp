#pragma once

#include "analysis.hpp"
#include "checkpoint.hpp"
#include "config.hpp"
#include "data.hpp"
#include "gradcheck.hpp"
#include "losses.hpp"
#include "masks.hpp"
#include "model.hpp"
#include "rng.hpp"
#include "tensor.hpp"
#include "trainer.hpp"
