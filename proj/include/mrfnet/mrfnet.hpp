#pragma once

#include "mrfnet/error.hpp"
#include "mrfnet/parallel.hpp"
#include "mrfnet/tensor.hpp"
#include "mrfnet/layers.hpp"
#include "mrfnet/inference.hpp"
#include "mrfnet/augment.hpp"
#include "mrfnet/train.hpp"
#include "mrfnet/oracle.hpp"
#include "mrfnet/metrics.hpp"
#include "mrfnet/io.hpp"
#include "mrfnet/pipeline.hpp"
