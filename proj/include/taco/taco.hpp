/*
 * Copyright (c) 2026 The TACO Toolkit Authors. All Rights Reserved.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#ifndef TACO_TACO_HPP
#define TACO_TACO_HPP

#include "taco/calib.hpp"
#include "taco/constraints.hpp"
#include "taco/data.hpp"
#include "taco/errors.hpp"
#include "taco/matrix.hpp"
#include "taco/parallel.hpp"
#include "taco/pipeline.hpp"
#include "taco/random.hpp"
#include "taco/refnet.hpp"
#include "taco/solvers.hpp"
#include "taco/synth.hpp"
#include "taco/tensor_store.hpp"

#endif // TACO_TACO_HPP
