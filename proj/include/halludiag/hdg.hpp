// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "halludiag/hdg/filter.hpp"
#include "halludiag/hdg/pipeline.hpp"
#include "halludiag/hdg/record.hpp"
#include "halludiag/hdg/stages.hpp"
