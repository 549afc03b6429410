// Copyright 2026 The pivotdpr Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Umbrella header.

#include "pivotdpr/common.hpp"
#include "pivotdpr/text.hpp"
#include "pivotdpr/corpus.hpp"
#include "pivotdpr/curate.hpp"
#include "pivotdpr/tokenizer.hpp"
#include "pivotdpr/pretrain.hpp"
#include "pivotdpr/encoder.hpp"
#include "pivotdpr/retrieval.hpp"
#include "pivotdpr/eval.hpp"
#include "pivotdpr/pipeline.hpp"
