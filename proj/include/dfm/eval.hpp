#pragma once

// Agreement metrics, fold summaries and classroom-level correlation analysis.

#include "dfm/data.hpp"
#include "dfm/objective.hpp"

#include <map>
#include <span>
#include <string>
#include <vector>

namespace dfm {

// Rows are true classes, columns predicted classes; both 1-based.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(int categories);
    static ConfusionMatrix from(std::span<const int> truth, std::span<const int> pred, int categories);

    int categories() const { return k_; }
    long& at(int truth, int pred);
    long at(int truth, int pred) const;
    long total() const;
    void add(const ConfusionMatrix& other);

private:
    int k_;
    std::vector<long> counts_;
};

// 1 - sum w O / sum w E with w_ij = (i - j)^2 and E from the outer product of
// the marginals.  When sum w E is zero: 1 for perfect agreement, else 0.
double qwk(const ConfusionMatrix& confusion);
double qwk(std::span<const int> truth, std::span<const int> pred, int categories);

struct Summary {
    double mean = 0.0;
    double standard_error = 0.0;  // sample sd / sqrt(n); 0 when n == 1
};

Summary fold_summary(std::span<const double> values);

struct IrrResult {
    std::vector<std::pair<std::string, double>> per_rater;  // sorted by rater id
    std::vector<std::string> skipped;                       // raters with no segments for the component
    Summary summary;
};

// For every rater: QWK (4 categories) between their scores and the co-rater's
// scores on the segments they rated.
IrrResult irr_leave_one_rater_out(const std::vector<RaterRecord>& records, Component component);

// Mean over segments within a lesson, then over lessons within a teacher.
std::map<std::string, double> classroom_aggregate(const std::map<std::string, double>& segment_scores,
                                                  const DatasetManifest& manifest);

struct Correlation {
    double r = 0.0;
    double p = 1.0;  // two-tailed, t distribution with n - 2 degrees of freedom
    std::size_t n = 0;
};

Correlation pearson_r(std::span<const double> x, std::span<const double> y);
// "*" p < .05, "**" p < .01, "***" p < .001
std::string significance_stars(double p);

// ---- reports ------------------------------------------------------------------

struct PredictionRow {
    std::string segment_id;
    Component component = Component::Nature;
    double truth = 0.0;
    double predicted = 0.0;
    std::size_t fold = 0;
};

struct ComponentReport {
    std::vector<double> fold_qwk;
    Summary summary;
    ConfusionMatrix confusion{kNumClasses};  // pooled over folds
};

struct EvaluationReport {
    std::string label;
    std::map<Component, ComponentReport> components;
    // Per fold, the mean QWK across components, summarized over folds.
    std::vector<double> fold_average;
    Summary average;
};

// Builds per-fold QWK (7 categories) from a complete prediction table.
EvaluationReport build_report(const std::string& label, const std::vector<PredictionRow>& predictions,
                              std::size_t n_folds);

std::string report_to_json(const EvaluationReport& report);
std::string predictions_to_csv(const std::vector<PredictionRow>& rows);
std::vector<PredictionRow> predictions_from_csv(const std::string& text);

// Aligned text table, one row per report, columns per component plus average,
// "mean (se)" cells.
std::string format_table(const std::vector<EvaluationReport>& reports, const std::string& row_header = "Variant");

// ---- student outcomes -----------------------------------------------------------

enum class Outcome { TestScore, Interest, SelfEfficacy };
inline constexpr std::array<Outcome, 3> kOutcomes = {Outcome::TestScore, Outcome::Interest, Outcome::SelfEfficacy};
std::string_view outcome_key(Outcome o);

struct OutcomeCorrelation {
    std::string source;  // "human" or "model"
    Component component = Component::Nature;
    Outcome outcome = Outcome::TestScore;
    Correlation correlation;
};

// Joins each student to their teacher's classroom score and correlates across
// students.  `teacher_scores` maps component -> teacher -> score.
std::vector<OutcomeCorrelation> outcome_correlations(
    const std::string& source, const std::map<Component, std::map<std::string, double>>& teacher_scores,
    const std::vector<StudentRecord>& students);

}  // namespace dfm
