/* Copyright 2026 The fmseg Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#ifndef FMSEG_ALIGN_HPP_
#define FMSEG_ALIGN_HPP_

#include "fmseg/align/checkpoint.hpp"
#include "fmseg/align/heads.hpp"
#include "fmseg/align/labels.hpp"
#include "fmseg/align/losses.hpp"
#include "fmseg/align/train.hpp"

#endif  // FMSEG_ALIGN_HPP_
