#pragma once

#include "crackseg/adam.hpp"
#include "crackseg/checkpoint.hpp"
#include "crackseg/data.hpp"
#include "crackseg/error.hpp"
#include "crackseg/eval.hpp"
#include "crackseg/image_io.hpp"
#include "crackseg/json_config.hpp"
#include "crackseg/layers.hpp"
#include "crackseg/losses.hpp"
#include "crackseg/mask.hpp"
#include "crackseg/rng.hpp"
#include "crackseg/tensor.hpp"
#include "crackseg/train.hpp"
#include "crackseg/unet.hpp"
