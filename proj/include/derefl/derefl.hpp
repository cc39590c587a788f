#pragma once

// Umbrella header: the whole reflection-removal toolkit.

#include "derefl/adam.hpp"
#include "derefl/autodiff.hpp"
#include "derefl/common.hpp"
#include "derefl/dataset.hpp"
#include "derefl/gradcheck.hpp"
#include "derefl/image.hpp"
#include "derefl/kernel.hpp"
#include "derefl/loss.hpp"
#include "derefl/model.hpp"
#include "derefl/png_io.hpp"
#include "derefl/synthesis.hpp"
#include "derefl/tensor.hpp"
#include "derefl/trainer.hpp"
#include "derefl/weights_io.hpp"
