#pragma once

// Shared between lm.cpp and fuser.cpp: specialist <-> container plumbing.
// Not installed; nlohmann stays private to the library.

#include <nlohmann/json.hpp>

#include "fuselm/lm.hpp"

namespace fuselm {
struct FusedModel;
}

namespace fuselm::detail_lm {

nlohmann::json specialist_meta(const Specialist& spec);

Specialist specialist_from_parts(
    const nlohmann::json& meta,
    const std::vector<std::pair<std::string, Tensor>>& tensors, size_t first,
    size_t count, const Tokenizer& tokenizer, const std::string& name_prefix);

// Fused-model (de)composition against a tensor list. `fused_from_parts`
// consumes tensors starting at `first` and reports how many it used.
nlohmann::json fused_meta(const FusedModel& model);
std::vector<std::pair<std::string, Tensor>> fused_tensors(const FusedModel& model);
FusedModel fused_from_parts(const nlohmann::json& meta,
                            const std::vector<std::pair<std::string, Tensor>>& tensors,
                            size_t first, size_t* consumed, const Tokenizer& tokenizer);

}  // namespace fuselm::detail_lm
