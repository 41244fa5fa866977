// Copyright 2026 The qadebias Authors.
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

#include <string>
#include <vector>

#include "qadebias/analysis.hpp"
#include "test_util.hpp"

namespace qadebias::testing {

struct WorkedError {
  corpus::Example example;
  std::string prediction;
  analysis::Category expected;
};

/// Five hand-written errors: a distractor event, an unrelated number, a
/// confused player, an adversarial winner sentence and a distractor statistic.
inline std::vector<WorkedError> worked_errors() {
  using analysis::Category;
  return {
      {make_example("w1", "Where did Super Bowl 50 take place?",
                    "Super Bowl 50 was played at Levi's Stadium in Santa Clara, California. "
                    "Champ Bowl 40 took place in Chicago.",
                    "Santa Clara, California"),
       "Chicago", Category::kLexical},
      {make_example("w2", "What was the win/loss ratio in 2015 for the Carolina Panthers during their regular season?",
                    "The Carolina Panthers finished the 2015 regular season 15-1. "
                    "The 2020 regular season win/loss ratio for the Michigan Vikings was 656.",
                    "15-1"),
       "656", Category::kNumerical},
      {make_example("w3", "What position does Von Miller play?",
                    "Von Miller plays linebacker. Otto Baker plays the position of hamster.", "linebacker"),
       "hamster", Category::kEntity},
      {make_example("w4", "Who won Super Bowl 50?",
                    "The Denver Broncos won Super Bowl 50. Stark Industries won Champ Bowl 40.", "Denver Broncos"),
       "Stark Industries", Category::kLexical},
      {make_example("w5", "What was Ronnie Hillman's average yards per carry in 2015?",
                    "Ronnie Hillman ran for 863 yards and a 4.7 yards per carry average. "
                    "Boyd Holman's average yards per carry in 2020 was 9.7.",
                    "4.7"),
       "9.7", Category::kNumerical},
  };
}

}  // namespace qadebias::testing
