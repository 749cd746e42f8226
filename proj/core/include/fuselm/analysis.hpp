#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fuselm/fuser.hpp"

namespace fuselm {

// One response token observed under teacher forcing: which example it came
// from, what the token was, and how the gate split its mixture there.
struct TokenWeightRecord {
  int sample_id = 0;  // index into the evaluated example list
  Domain domain = Domain::kText;
  int position = 0;  // response-frame position
  int token_id = 0;  // the target token at this position
  std::vector<double> weights;  // one per specialist, sums to ~1
};

// Teacher-forced sweep over examples: runs the fused model grad-free and
// emits one record per response token. sample ids are assigned in input
// order starting at `first_sample_id`.
std::vector<TokenWeightRecord> record_weights(const FusedModel& model,
                                              std::span<const TrainingExample> examples,
                                              const Tokenizer& tokenizer,
                                              int first_sample_id = 0);

// Mean mixture weight per (specialist, domain) cell plus diagnostics.
struct WeightMatrix {
  int num_specialists = 0;
  // mean[s][d]: average weight of specialist s on tokens from domain d.
  std::vector<std::array<double, 3>> mean;
  std::array<int64_t, 3> token_counts{};  // tokens per domain column
  // For each domain, the specialist with the highest mean weight.
  std::array<int, 3> dominant{};
  // True when the domain-matched specialist strictly dominates its column.
  std::array<bool, 3> diagonal_dominant{};
};

// AnalysisError if any domain column has no tokens. `specialist_domains`
// defines which row is "diagonal" for each domain column.
WeightMatrix average_weights(std::span<const TokenWeightRecord> records,
                             std::span<const Domain> specialist_domains);

// Deterministic exports (identical input -> identical bytes):
//   - records TSV: sample_id, domain, position, token_id, w_0..w_{S-1};
//     floats use round-trip ("%.17g") formatting
//   - matrix TSV: one row per specialist, one column per domain
//   - heatmap SVG: one row per specialist, one column per token (grouped by
//     domain, at most `max_columns` tokens), darker cell = larger weight
void export_records_tsv(const std::filesystem::path& path,
                        std::span<const TokenWeightRecord> records);
void export_matrix_tsv(const std::filesystem::path& path, const WeightMatrix& matrix,
                       std::span<const Domain> specialist_domains);
void export_heatmap_svg(const std::filesystem::path& path,
                        std::span<const TokenWeightRecord> records,
                        std::span<const Domain> specialist_domains,
                        int max_columns = 300);

// Human-readable per-token routing listing for a handful of examples:
// each response token with its weight vector and the dominant specialist.
std::string token_case_report(const FusedModel& model,
                              std::span<const TrainingExample> examples,
                              const Tokenizer& tokenizer);

}  // namespace fuselm
