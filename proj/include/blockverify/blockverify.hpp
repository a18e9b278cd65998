// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "blockverify/types.hpp"
#include "blockverify/random.hpp"
#include "blockverify/model.hpp"
#include "blockverify/verification.hpp"
#include "blockverify/correction.hpp"
#include "blockverify/decode.hpp"
#include "blockverify/analysis.hpp"
#include "blockverify/model_spec.hpp"
