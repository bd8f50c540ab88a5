#pragma once

#include "metacs/linop/circulant.hpp"
#include "metacs/linop/conv.hpp"
#include "metacs/linop/operator.hpp"
#include "metacs/linop/tv.hpp"
