#pragma once

#include "meswitch/analytics.hpp"
#include "meswitch/artifact.hpp"
#include "meswitch/batch.hpp"
#include "meswitch/binary_io.hpp"
#include "meswitch/calibration.hpp"
#include "meswitch/compress.hpp"
#include "meswitch/delta_kernel.hpp"
#include "meswitch/distill.hpp"
#include "meswitch/error.hpp"
#include "meswitch/numerics.hpp"
#include "meswitch/pipeline.hpp"
#include "meswitch/quant.hpp"
#include "meswitch/registry.hpp"
#include "meswitch/router.hpp"
#include "meswitch/salient.hpp"
#include "meswitch/server.hpp"
#include "meswitch/svd.hpp"
#include "meswitch/synthetic.hpp"
#include "meswitch/toylm.hpp"
