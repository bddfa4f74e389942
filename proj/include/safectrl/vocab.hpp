#pragma once

#include <string>
#include <vector>

#include "safectrl/errors.hpp"

namespace safectrl {

// Fixed shapes-world vocabulary. Index 0 is the always-present null token.
// "star" is the hazard concept; "cave" is the decoy context statistically
// associated with hazards in the training corpus.
inline const std::vector<std::string>& vocabulary() {
    static const std::vector<std::string> words = {
        "<null>", "disc", "square", "triangle", "star",  "red",
        "green",  "blue", "yellow", "plain",    "dark", "cave",
    };
    return words;
}

inline constexpr int kNullToken = 0;
inline constexpr int kHazardToken = 4;   // "star"
inline constexpr int kDecoyToken = 11;   // "cave"
inline constexpr int kFirstColorToken = 5;  // red..yellow = 5..8
inline constexpr int kNumColors = 4;
inline constexpr int kMaxPromptLen = 8;

inline int token_id(const std::string& word) {
    const auto& v = vocabulary();
    for (size_t i = 0; i < v.size(); ++i)
        if (v[i] == word) return static_cast<int>(i);
    throw ConfigError("unknown token '" + word + "'");
}

}  // namespace safectrl
