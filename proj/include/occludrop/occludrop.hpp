#pragma once

#include "occludrop/batchnorm.hpp"
#include "occludrop/checkpoint.hpp"
#include "occludrop/config.hpp"
#include "occludrop/conv.hpp"
#include "occludrop/data.hpp"
#include "occludrop/errors.hpp"
#include "occludrop/gradcheck.hpp"
#include "occludrop/gradsuite.hpp"
#include "occludrop/lcd.hpp"
#include "occludrop/margin.hpp"
#include "occludrop/metrics.hpp"
#include "occludrop/model.hpp"
#include "occludrop/ops.hpp"
#include "occludrop/optim.hpp"
#include "occludrop/png_io.hpp"
#include "occludrop/sam.hpp"
#include "occludrop/spatial_reg.hpp"
#include "occludrop/strategies.hpp"
#include "occludrop/tensor.hpp"
#include "occludrop/train.hpp"
