#include "fuselm/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace fuselm {

namespace {

// Round-trip decimal form: enough digits to reconstruct the exact double.
std::string fmt_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

}  // namespace

std::vector<TokenWeightRecord> record_weights(const FusedModel& model,
                                              std::span<const TrainingExample> examples,
                                              const Tokenizer& tokenizer,
                                              int first_sample_id) {
  model.validate();
  NoGradGuard guard;
  const auto templates = model.templates();
  const int s_count = model.num_specialists();
  std::vector<TokenWeightRecord> records;
  int sample_id = first_sample_id;
  for (const TrainingExample& ex : examples) {
    WrappedExample w = wrap_example(ex, templates, tokenizer, model.config().max_seq_len);
    FusedForward f = fused_forward(model, w, FuseMode::kInference);
    for (int r = 0; r < w.response_len; ++r) {
      TokenWeightRecord rec;
      rec.sample_id = sample_id;
      rec.domain = ex.domain;
      rec.position = r;
      rec.token_id = f.targets[static_cast<size_t>(r)];
      rec.weights.resize(static_cast<size_t>(s_count));
      for (int s = 0; s < s_count; ++s) {
        rec.weights[static_cast<size_t>(s)] = f.weights.at(r, s);
      }
      records.push_back(std::move(rec));
    }
    ++sample_id;
  }
  return records;
}

WeightMatrix average_weights(std::span<const TokenWeightRecord> records,
                             std::span<const Domain> specialist_domains) {
  if (records.empty()) throw AnalysisError("average_weights: no records");
  const int s_count = static_cast<int>(specialist_domains.size());
  if (s_count == 0) throw AnalysisError("average_weights: no specialists");

  WeightMatrix m;
  m.num_specialists = s_count;
  m.mean.assign(static_cast<size_t>(s_count), {0.0, 0.0, 0.0});
  for (const TokenWeightRecord& rec : records) {
    if (static_cast<int>(rec.weights.size()) != s_count) {
      throw AnalysisError("record holds " + std::to_string(rec.weights.size()) +
                          " weights for " + std::to_string(s_count) + " specialists");
    }
    const size_t d = static_cast<size_t>(rec.domain);
    m.token_counts[d] += 1;
    for (int s = 0; s < s_count; ++s) {
      m.mean[static_cast<size_t>(s)][d] += rec.weights[static_cast<size_t>(s)];
    }
  }
  for (size_t d = 0; d < 3; ++d) {
    if (m.token_counts[d] == 0) {
      throw AnalysisError("no tokens observed for domain '" +
                          std::string(domain_name(kAllDomains[d])) + "'");
    }
    for (int s = 0; s < s_count; ++s) {
      m.mean[static_cast<size_t>(s)][d] /= static_cast<double>(m.token_counts[d]);
    }
    int best = 0;
    for (int s = 1; s < s_count; ++s) {
      if (m.mean[static_cast<size_t>(s)][d] > m.mean[static_cast<size_t>(best)][d]) best = s;
    }
    m.dominant[d] = best;
    // Strict dominance of the domain-matched specialist over every rival.
    int matched = -1;
    for (int s = 0; s < s_count; ++s) {
      if (specialist_domains[static_cast<size_t>(s)] == kAllDomains[d]) {
        matched = s;
        break;
      }
    }
    bool dominant = matched >= 0;
    if (matched >= 0) {
      for (int s = 0; s < s_count && dominant; ++s) {
        if (s == matched) continue;
        dominant = m.mean[static_cast<size_t>(matched)][d] >
                   m.mean[static_cast<size_t>(s)][d];
      }
    }
    m.diagonal_dominant[d] = dominant;
  }
  return m;
}

void export_records_tsv(const std::filesystem::path& path,
                        std::span<const TokenWeightRecord> records) {
  std::ofstream out = open_out(path);
  const size_t s_count = records.empty() ? 0 : records.front().weights.size();
  out << "sample_id\tdomain\tposition\ttoken_id";
  for (size_t s = 0; s < s_count; ++s) out << "\tw_" << s;
  out << '\n';
  for (const TokenWeightRecord& rec : records) {
    out << rec.sample_id << '\t' << domain_name(rec.domain) << '\t' << rec.position
        << '\t' << rec.token_id;
    for (double w : rec.weights) out << '\t' << fmt_g17(w);
    out << '\n';
  }
  if (!out) throw IoError("short write to " + path.string());
}

void export_matrix_tsv(const std::filesystem::path& path, const WeightMatrix& matrix,
                       std::span<const Domain> specialist_domains) {
  if (static_cast<int>(specialist_domains.size()) != matrix.num_specialists) {
    throw AnalysisError("matrix/specialist list size mismatch");
  }
  std::ofstream out = open_out(path);
  out << "specialist";
  for (Domain d : kAllDomains) out << '\t' << domain_name(d) << "_data";
  out << '\n';
  for (int s = 0; s < matrix.num_specialists; ++s) {
    out << domain_name(specialist_domains[static_cast<size_t>(s)]);
    for (size_t d = 0; d < 3; ++d) out << '\t' << fmt_g17(matrix.mean[static_cast<size_t>(s)][d]);
    out << '\n';
  }
  if (!out) throw IoError("short write to " + path.string());
}

void export_heatmap_svg(const std::filesystem::path& path,
                        std::span<const TokenWeightRecord> records,
                        std::span<const Domain> specialist_domains,
                        int max_columns) {
  if (max_columns <= 0) throw AnalysisError("heatmap needs a positive column budget");
  const int s_count = static_cast<int>(specialist_domains.size());

  // Group columns by domain for a readable figure; within a domain keep
  // evaluation order. Stable sort keeps the export deterministic.
  std::vector<const TokenWeightRecord*> cols;
  cols.reserve(records.size());
  for (const TokenWeightRecord& r : records) cols.push_back(&r);
  std::stable_sort(cols.begin(), cols.end(),
                   [](const TokenWeightRecord* a, const TokenWeightRecord* b) {
                     return static_cast<int>(a->domain) < static_cast<int>(b->domain);
                   });
  if (static_cast<int>(cols.size()) > max_columns) {
    // Even thinning across the full set, preserving domain proportions.
    std::vector<const TokenWeightRecord*> kept;
    kept.reserve(static_cast<size_t>(max_columns));
    const double stride = static_cast<double>(cols.size()) / max_columns;
    for (int i = 0; i < max_columns; ++i) {
      kept.push_back(cols[static_cast<size_t>(i * stride)]);
    }
    cols = std::move(kept);
  }

  constexpr int kCell = 4;        // px per token column
  constexpr int kRow = 28;        // px per specialist row
  constexpr int kLabel = 64;      // left gutter for row labels
  constexpr int kTop = 18;        // header strip for domain markers
  constexpr int kGap = 3;         // px between domain groups
  int gaps = 0;
  for (size_t i = 1; i < cols.size(); ++i) {
    if (cols[i]->domain != cols[i - 1]->domain) ++gaps;
  }
  const int width = kLabel + static_cast<int>(cols.size()) * kCell + gaps * kGap + 4;
  const int height = kTop + s_count * kRow + 4;

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
      << "\" height=\"" << height << "\">\n";
  svg << "<rect width=\"" << width << "\" height=\"" << height
      << "\" fill=\"white\"/>\n";
  for (int s = 0; s < s_count; ++s) {
    svg << "<text x=\"2\" y=\"" << (kTop + s * kRow + kRow / 2 + 4)
        << "\" font-family=\"monospace\" font-size=\"12\">"
        << domain_name(specialist_domains[static_cast<size_t>(s)]) << "</text>\n";
  }
  int x = kLabel;
  Domain current = cols.empty() ? Domain::kText : cols.front()->domain;
  int group_start = x;
  auto flush_label = [&](Domain d, int from, int to) {
    svg << "<text x=\"" << (from + to) / 2 << "\" y=\"" << (kTop - 6)
        << "\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"middle\">"
        << domain_name(d) << "</text>\n";
  };
  for (size_t i = 0; i < cols.size(); ++i) {
    const TokenWeightRecord& rec = *cols[i];
    if (rec.domain != current) {
      flush_label(current, group_start, x);
      x += kGap;
      group_start = x;
      current = rec.domain;
    }
    for (int s = 0; s < s_count; ++s) {
      const double w = std::clamp(rec.weights[static_cast<size_t>(s)], 0.0, 1.0);
      // Darker means more weight.
      const int shade = static_cast<int>(std::lround(255.0 * (1.0 - w)));
      svg << "<rect x=\"" << x << "\" y=\"" << (kTop + s * kRow) << "\" width=\""
          << kCell << "\" height=\"" << kRow << "\" fill=\"rgb(" << shade << ","
          << shade << "," << shade << ")\"/>\n";
    }
    x += kCell;
  }
  if (!cols.empty()) flush_label(current, group_start, x);
  svg << "</svg>\n";

  std::ofstream out = open_out(path);
  out << svg.str();
  if (!out) throw IoError("short write to " + path.string());
}

std::string token_case_report(const FusedModel& model,
                              std::span<const TrainingExample> examples,
                              const Tokenizer& tokenizer) {
  const auto records_domains = model.domains();
  std::ostringstream out;
  int sample_id = 0;
  for (const TrainingExample& ex : examples) {
    const TrainingExample one[] = {ex};
    const auto records = record_weights(model, one, tokenizer, sample_id++);
    out << "[" << domain_name(ex.domain) << "] prompt=\"" << ex.prompt
        << "\" response=\"" << ex.response << "\"\n";
    for (const TokenWeightRecord& rec : records) {
      char shown = '?';
      std::string label;
      if (rec.token_id == Tokenizer::kEos) {
        label = "<end>";
      } else {
        shown = tokenizer.id_char(rec.token_id);
        label = std::string(1, shown);
        if (shown == '\n') label = "\\n";
      }
      char buf[32];
      out << "  pos " << rec.position << "  '" << label << "'  w=[";
      int best = 0;
      for (size_t s = 0; s < rec.weights.size(); ++s) {
        if (rec.weights[s] > rec.weights[static_cast<size_t>(best)]) best = static_cast<int>(s);
        std::snprintf(buf, sizeof(buf), "%.3f", rec.weights[s]);
        out << (s ? " " : "") << buf;
      }
      out << "] -> " << domain_name(records_domains[static_cast<size_t>(best)]) << "\n";
    }
  }
  return out.str();
}

}  // namespace fuselm
