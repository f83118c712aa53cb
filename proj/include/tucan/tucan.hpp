#pragma once

#include "tucan/capsule.hpp"
#include "tucan/capsule_layers.hpp"
#include "tucan/checkpoint.hpp"
#include "tucan/colorspace.hpp"
#include "tucan/config.hpp"
#include "tucan/datapipe.hpp"
#include "tucan/error.hpp"
#include "tucan/evalkit.hpp"
#include "tucan/layers.hpp"
#include "tucan/losses.hpp"
#include "tucan/net.hpp"
#include "tucan/optim.hpp"
#include "tucan/tensor.hpp"
#include "tucan/trainer.hpp"
