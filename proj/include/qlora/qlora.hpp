#pragma once

#include "qlora/error.hpp"
#include "qlora/tensor.hpp"
#include "qlora/binary_io.hpp"
#include "qlora/quant.hpp"
#include "qlora/lora.hpp"
#include "qlora/tokenizer.hpp"
#include "qlora/model.hpp"
#include "qlora/data.hpp"
#include "qlora/train.hpp"
#include "qlora/metrics.hpp"
#include "qlora/cli.hpp"
