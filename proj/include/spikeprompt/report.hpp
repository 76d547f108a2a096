#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "spikeprompt/checkpoint.hpp"
#include "spikeprompt/errors.hpp"

namespace spikeprompt {

struct EvalCell {
    std::string family;
    double intensity = 0.0;
    std::string label;
    double accuracy = 0.0;
};

/// One method/seed evaluation: clean accuracy plus one cell per grid entry.
/// Family averages are recomputed on demand with a fixed left-to-right sum so
/// they are exactly reproducible from the raw cells.
struct EvalReport {
    std::string method;
    std::uint64_t seed = 0;
    std::string config_hash;
    double clean_accuracy = 0.0;
    std::vector<EvalCell> cells;

    std::vector<std::pair<std::string, double>> family_averages() const {
        std::vector<std::pair<std::string, double>> order;  // family -> sum (then mean)
        std::vector<int> counts;
        for (const auto& c : cells) {
            std::size_t idx = order.size();
            for (std::size_t i = 0; i < order.size(); ++i) {
                if (order[i].first == c.family) {
                    idx = i;
                    break;
                }
            }
            if (idx == order.size()) {
                order.emplace_back(c.family, 0.0);
                counts.push_back(0);
            }
            order[idx].second += c.accuracy;
            counts[idx] += 1;
        }
        for (std::size_t i = 0; i < order.size(); ++i) order[i].second /= static_cast<double>(counts[i]);
        return order;
    }
};

struct TrainLogEntry {
    int epoch = 0;
    double mean_loss = 0.0;
    double train_accuracy = 0.0;
};

inline std::string training_log_csv(const std::vector<TrainLogEntry>& log) {
    std::string out = "epoch,mean_loss,train_accuracy\n";
    for (const auto& e : log) {
        out += std::to_string(e.epoch) + "," + format_double_exact(e.mean_loss) + "," +
               format_double_exact(e.train_accuracy) + "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// CSV layout: method,seed,config_hash,clean,<cell...>,<family_avg...>
// Cells print with a round-trip-exact float format so every average is
// recomputable from the parsed values bit-for-bit.
// ---------------------------------------------------------------------------

inline std::string eval_csv_header(const EvalReport& r) {
    std::string out = "method,seed,config_hash,clean";
    for (const auto& c : r.cells) out += "," + c.label;
    for (const auto& [family, avg] : r.family_averages()) out += "," + family + "_avg";
    out += "\n";
    return out;
}

inline std::string eval_csv_row(const EvalReport& r) {
    std::string out = r.method + "," + std::to_string(r.seed) + "," + r.config_hash + "," +
                      format_double_exact(r.clean_accuracy);
    for (const auto& c : r.cells) out += "," + format_double_exact(c.accuracy);
    for (const auto& [family, avg] : r.family_averages()) out += "," + format_double_exact(avg);
    out += "\n";
    return out;
}

inline std::string eval_csv(const EvalReport& r) { return eval_csv_header(r) + eval_csv_row(r); }

/// Ablation bundle: one EvalReport per (method, seed), method-major order.
struct AblationReport {
    std::vector<EvalReport> runs;
};

namespace detail {

inline void require_aligned_cells(const AblationReport& rep) {
    if (rep.runs.empty()) throw ContractError("ablation report is empty");
    for (const auto& r : rep.runs) {
        if (r.cells.size() != rep.runs[0].cells.size()) throw ContractError("ablation grids differ");
        for (std::size_t i = 0; i < r.cells.size(); ++i) {
            if (r.cells[i].label != rep.runs[0].cells[i].label) throw ContractError("ablation grids differ");
        }
    }
}

}  // namespace detail

inline std::string ablation_csv(const AblationReport& rep) {
    detail::require_aligned_cells(rep);
    std::string out = eval_csv_header(rep.runs[0]);
    for (const auto& r : rep.runs) out += eval_csv_row(r);
    return out;
}

struct MethodMean {
    std::string method;
    int seed_count = 0;
    double clean = 0.0;
    std::vector<double> cells;  // aligned with the grid labels
    std::vector<std::pair<std::string, double>> family_avgs;
};

/// Seed-averaged rows per method, preserving method order of first appearance.
inline std::vector<MethodMean> ablation_method_means(const AblationReport& rep) {
    detail::require_aligned_cells(rep);
    std::vector<MethodMean> means;
    for (const auto& r : rep.runs) {
        MethodMean* m = nullptr;
        for (auto& cand : means)
            if (cand.method == r.method) m = &cand;
        if (m == nullptr) {
            means.push_back(MethodMean{r.method, 0, 0.0, std::vector<double>(r.cells.size(), 0.0), {}});
            m = &means.back();
        }
        m->seed_count += 1;
        m->clean += r.clean_accuracy;
        for (std::size_t i = 0; i < r.cells.size(); ++i) m->cells[i] += r.cells[i].accuracy;
    }
    for (auto& m : means) {
        m.clean /= static_cast<double>(m.seed_count);
        for (auto& c : m.cells) c /= static_cast<double>(m.seed_count);
        // family averages recomputed from the mean cells, same left-to-right rule
        EvalReport tmp;
        tmp.cells = rep.runs[0].cells;
        for (std::size_t i = 0; i < tmp.cells.size(); ++i) tmp.cells[i].accuracy = m.cells[i];
        m.family_avgs = tmp.family_averages();
    }
    return means;
}

inline std::string ablation_mean_csv(const AblationReport& rep) {
    const auto means = ablation_method_means(rep);
    std::string out = "method,seed_count,clean";
    for (const auto& c : rep.runs[0].cells) out += "," + c.label;
    for (const auto& [family, avg] : means[0].family_avgs) out += "," + family + "_avg";
    out += "\n";
    for (const auto& m : means) {
        out += m.method + "," + std::to_string(m.seed_count) + "," + format_double_exact(m.clean);
        for (double c : m.cells) out += "," + format_double_exact(c);
        for (const auto& [family, avg] : m.family_avgs) out += "," + format_double_exact(avg);
        out += "\n";
    }
    return out;
}

/// Human-readable table: one block per corruption family, methods as rows,
/// intensities plus the family average as columns, seed-mean percentages.
inline std::string ablation_text(const AblationReport& rep) {
    const auto means = ablation_method_means(rep);
    const auto& ref_cells = rep.runs[0].cells;

    std::vector<std::string> families;
    for (const auto& c : ref_cells) {
        bool seen = false;
        for (const auto& f : families) seen = seen || f == c.family;
        if (!seen) families.push_back(c.family);
    }

    char buf[128];
    std::string out;
    std::snprintf(buf, sizeof(buf), "%-12s %8s\n", "method", "clean");
    out += "== clean ==\n";
    out += buf;
    for (const auto& m : means) {
        std::snprintf(buf, sizeof(buf), "%-12s %7.2f%%\n", m.method.c_str(), 100.0 * m.clean);
        out += buf;
    }
    out += "\n";

    for (const auto& family : families) {
        out += "== " + family + " ==\n";
        std::string header;
        std::snprintf(buf, sizeof(buf), "%-12s", "method");
        header += buf;
        for (std::size_t i = 0; i < ref_cells.size(); ++i) {
            if (ref_cells[i].family != family) continue;
            std::snprintf(buf, sizeof(buf), " %8.2f", ref_cells[i].intensity);
            header += buf;
        }
        header += "  average\n";
        out += header;
        for (const auto& m : means) {
            std::snprintf(buf, sizeof(buf), "%-12s", m.method.c_str());
            out += buf;
            for (std::size_t i = 0; i < ref_cells.size(); ++i) {
                if (ref_cells[i].family != family) continue;
                std::snprintf(buf, sizeof(buf), " %7.2f%%", 100.0 * m.cells[i]);
                out += buf;
            }
            double avg = 0.0;
            for (const auto& [f, a] : m.family_avgs)
                if (f == family) avg = a;
            std::snprintf(buf, sizeof(buf), " %7.2f%%\n", 100.0 * avg);
            out += buf;
        }
        out += "\n";
    }
    return out;
}

}  // namespace spikeprompt
