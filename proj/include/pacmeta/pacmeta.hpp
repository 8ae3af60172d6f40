#pragma once

#include "pacmeta/autodiff.hpp"
#include "pacmeta/binary_kl.hpp"
#include "pacmeta/bounds.hpp"
#include "pacmeta/config.hpp"
#include "pacmeta/envs.hpp"
#include "pacmeta/evalreport.hpp"
#include "pacmeta/metatrain.hpp"
#include "pacmeta/rng.hpp"
#include "pacmeta/stochnet.hpp"
#include "pacmeta/tensor.hpp"
