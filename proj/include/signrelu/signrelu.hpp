#pragma once

#include "signrelu/diffusion.hpp"
#include "signrelu/errors.hpp"
#include "signrelu/eval_bounds.hpp"
#include "signrelu/grad.hpp"
#include "signrelu/net.hpp"
#include "signrelu/parallel.hpp"
#include "signrelu/q0.hpp"
#include "signrelu/quadrature.hpp"
#include "signrelu/ratio_gate.hpp"
#include "signrelu/rng.hpp"
#include "signrelu/sclass.hpp"
#include "signrelu/stats.hpp"
#include "signrelu/train.hpp"
