#include "dfm/eval.hpp"

#include <boost/math/distributions/students_t.hpp>
#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

namespace dfm {

namespace {

std::string cell(const Summary& s) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(3) << s.mean << " (" << std::setprecision(2) << s.standard_error << ")";
    return os.str();
}

}  // namespace

ConfusionMatrix::ConfusionMatrix(int categories) : k_(categories) {
    if (categories < 1) throw UsageError("confusion matrix needs at least one category");
    counts_.assign(static_cast<std::size_t>(k_ * k_), 0);
}

ConfusionMatrix ConfusionMatrix::from(std::span<const int> truth, std::span<const int> pred, int categories) {
    if (truth.size() != pred.size()) {
        throw UsageError("qwk: " + std::to_string(truth.size()) + " true labels vs " + std::to_string(pred.size()) +
                         " predictions");
    }
    if (truth.empty()) throw UsageError("qwk: no items");
    ConfusionMatrix cm(categories);
    for (std::size_t i = 0; i < truth.size(); ++i) ++cm.at(truth[i], pred[i]);
    return cm;
}

long& ConfusionMatrix::at(int truth, int pred) {
    if (truth < 1 || truth > k_ || pred < 1 || pred > k_) {
        throw UsageError("class index out of range 1.." + std::to_string(k_));
    }
    return counts_[static_cast<std::size_t>((truth - 1) * k_ + (pred - 1))];
}

long ConfusionMatrix::at(int truth, int pred) const { return const_cast<ConfusionMatrix&>(*this).at(truth, pred); }

long ConfusionMatrix::total() const { return std::accumulate(counts_.begin(), counts_.end(), 0L); }

void ConfusionMatrix::add(const ConfusionMatrix& other) {
    if (other.k_ != k_) throw UsageError("cannot add confusion matrices of different sizes");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

double qwk(const ConfusionMatrix& cm) {
    const int k = cm.categories();
    const double n = static_cast<double>(cm.total());
    if (n == 0) throw UsageError("qwk: empty confusion matrix");
    std::vector<double> rows(k, 0.0), cols(k, 0.0);
    for (int i = 1; i <= k; ++i)
        for (int j = 1; j <= k; ++j) {
            rows[i - 1] += cm.at(i, j);
            cols[j - 1] += cm.at(i, j);
        }
    double observed = 0.0, expected = 0.0;
    for (int i = 1; i <= k; ++i)
        for (int j = 1; j <= k; ++j) {
            const double w = static_cast<double>((i - j) * (i - j));
            observed += w * cm.at(i, j);
            expected += w * rows[i - 1] * cols[j - 1] / n;
        }
    if (expected == 0.0) return observed == 0.0 ? 1.0 : 0.0;
    return 1.0 - observed / expected;
}

double qwk(std::span<const int> truth, std::span<const int> pred, int categories) {
    return qwk(ConfusionMatrix::from(truth, pred, categories));
}

Summary fold_summary(std::span<const double> values) {
    if (values.empty()) throw UsageError("fold_summary: no values");
    const double n = static_cast<double>(values.size());
    Summary s;
    s.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
    if (values.size() > 1) {
        double ss = 0.0;
        for (double v : values) ss += (v - s.mean) * (v - s.mean);
        s.standard_error = std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
    }
    return s;
}

IrrResult irr_leave_one_rater_out(const std::vector<RaterRecord>& records, Component component) {
    std::set<std::string> all_raters;
    std::map<std::string, std::vector<const RaterRecord*>> by_segment;
    for (const auto& r : records) {
        all_raters.insert(r.rater_id);
        if (r.component == component) by_segment[r.segment_id].push_back(&r);
    }
    std::map<std::string, std::pair<std::vector<int>, std::vector<int>>> pairs;  // rater -> (co-rater, own)
    for (const auto& [segment, recs] : by_segment) {
        if (recs.size() != 2) {
            throw DataError("segment " + segment + " is not double-rated for " + std::string(component_key(component)));
        }
        for (int self = 0; self < 2; ++self) {
            auto& p = pairs[recs[self]->rater_id];
            p.first.push_back(recs[1 - self]->score);
            p.second.push_back(recs[self]->score);
        }
    }
    IrrResult result;
    for (const auto& rater : all_raters) {
        auto it = pairs.find(rater);
        if (it == pairs.end()) {
            std::cerr << "warning: rater " << rater << " rated no segments for " << component_key(component)
                      << "; skipped\n";
            result.skipped.push_back(rater);
            continue;
        }
        result.per_rater.emplace_back(rater, qwk(it->second.first, it->second.second, 4));
    }
    if (result.per_rater.size() < 2) throw DataError("leave-one-rater-out IRR needs at least two raters");
    std::vector<double> values;
    for (const auto& [id, v] : result.per_rater) values.push_back(v);
    result.summary = fold_summary(values);
    return result;
}

std::map<std::string, double> classroom_aggregate(const std::map<std::string, double>& segment_scores,
                                                  const DatasetManifest& manifest) {
    std::map<std::string, const SegmentRecord*> index;
    for (const auto& s : manifest.segments) index[s.segment_id] = &s;
    // teacher -> lesson -> (sum, count)
    std::map<std::string, std::map<std::string, std::pair<double, int>>> acc;
    for (const auto& [id, score] : segment_scores) {
        auto it = index.find(id);
        if (it == index.end()) throw DataError("segment " + id + " is not in the manifest");
        auto& cellv = acc[it->second->teacher_id][it->second->lesson_id];
        cellv.first += score;
        cellv.second += 1;
    }
    std::map<std::string, double> out;
    for (const auto& [teacher, lessons] : acc) {
        double total = 0.0;
        for (const auto& [lesson, sc] : lessons) total += sc.first / sc.second;
        out[teacher] = total / static_cast<double>(lessons.size());
    }
    return out;
}

Correlation pearson_r(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw UsageError("pearson_r: length mismatch");
    if (x.size() < 3) throw UsageError("pearson_r: need at least three pairs");
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) throw DataError("pearson_r: correlation undefined for zero variance");
    Correlation c;
    c.n = x.size();
    c.r = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
    const double df = n - 2.0;
    if (std::abs(c.r) >= 1.0) {
        c.p = 0.0;
    } else {
        const double t = c.r * std::sqrt(df / (1.0 - c.r * c.r));
        const boost::math::students_t dist(df);
        c.p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
    }
    return c;
}

std::string significance_stars(double p) {
    if (p < 0.001) return "***";
    if (p < 0.01) return "**";
    if (p < 0.05) return "*";
    return "";
}

// ---- reports ---------------------------------------------------------------------

EvaluationReport build_report(const std::string& label, const std::vector<PredictionRow>& predictions,
                              std::size_t n_folds) {
    EvaluationReport report;
    report.label = label;
    std::map<Component, std::vector<std::pair<std::vector<int>, std::vector<int>>>> per_fold;
    for (const auto& row : predictions) {
        if (row.fold >= n_folds) throw UsageError("prediction fold index out of range");
        auto& folds = per_fold[row.component];
        folds.resize(n_folds);
        folds[row.fold].first.push_back(rating_to_index(row.truth));
        folds[row.fold].second.push_back(rating_to_index(row.predicted));
    }
    report.fold_average.assign(n_folds, 0.0);
    for (auto& [component, folds] : per_fold) {
        ComponentReport cr;
        for (std::size_t f = 0; f < n_folds; ++f) {
            if (folds[f].first.empty()) throw UsageError("fold " + std::to_string(f) + " has no predictions");
            const auto cm = ConfusionMatrix::from(folds[f].first, folds[f].second, kNumClasses);
            cr.fold_qwk.push_back(qwk(cm));
            cr.confusion.add(cm);
            report.fold_average[f] += cr.fold_qwk.back() / static_cast<double>(per_fold.size());
        }
        cr.summary = fold_summary(cr.fold_qwk);
        report.components.emplace(component, std::move(cr));
    }
    if (!per_fold.empty()) report.average = fold_summary(report.fold_average);
    return report;
}

std::string report_to_json(const EvaluationReport& report) {
    nlohmann::ordered_json doc;
    doc["label"] = report.label;
    nlohmann::ordered_json comps;
    for (const auto& [c, cr] : report.components) {
        nlohmann::ordered_json j;
        j["fold_qwk"] = cr.fold_qwk;
        j["mean"] = cr.summary.mean;
        j["standard_error"] = cr.summary.standard_error;
        std::vector<std::vector<long>> rows;
        for (int i = 1; i <= cr.confusion.categories(); ++i) {
            std::vector<long> row;
            for (int k = 1; k <= cr.confusion.categories(); ++k) row.push_back(cr.confusion.at(i, k));
            rows.push_back(std::move(row));
        }
        j["confusion"] = rows;
        comps[std::string(component_key(c))] = j;
    }
    doc["components"] = comps;
    doc["average"] = {{"fold_values", report.fold_average},
                      {"mean", report.average.mean},
                      {"standard_error", report.average.standard_error}};
    return doc.dump(2);
}

std::string predictions_to_csv(const std::vector<PredictionRow>& rows) {
    std::ostringstream os;
    os << "segment_id,component,true_rating,predicted_rating,fold\n";
    os << std::fixed << std::setprecision(1);
    for (const auto& r : rows) {
        os << r.segment_id << ',' << component_key(r.component) << ',' << r.truth << ',' << r.predicted << ','
           << r.fold << '\n';
    }
    return os.str();
}

std::vector<PredictionRow> predictions_from_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::vector<PredictionRow> rows;
    if (!std::getline(in, line) || line.rfind("segment_id,", 0) != 0) {
        throw DataError("prediction table lacks the expected header");
    }
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::stringstream ls(line);
        std::string f;
        while (std::getline(ls, f, ',')) fields.push_back(f);
        if (fields.size() != 5) throw DataError("prediction table line " + std::to_string(line_no) + " malformed");
        try {
            rows.push_back({fields[0], parse_component(fields[1]), std::stod(fields[2]), std::stod(fields[3]),
                            static_cast<std::size_t>(std::stoul(fields[4]))});
        } catch (const std::exception& e) {
            throw DataError("prediction table line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return rows;
}

std::string format_table(const std::vector<EvaluationReport>& reports, const std::string& row_header) {
    std::vector<std::vector<std::string>> grid;
    std::vector<std::string> header{row_header};
    for (Component c : kComponents) header.emplace_back(component_title(c));
    header.emplace_back("Average");
    grid.push_back(header);
    for (const auto& r : reports) {
        std::vector<std::string> row{r.label};
        for (Component c : kComponents) {
            auto it = r.components.find(c);
            row.push_back(it == r.components.end() ? "-" : cell(it->second.summary));
        }
        row.push_back(r.components.empty() ? "-" : cell(r.average));
        grid.push_back(std::move(row));
    }
    std::vector<std::size_t> width(header.size(), 0);
    for (const auto& row : grid)
        for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
    std::ostringstream os;
    for (std::size_t r = 0; r < grid.size(); ++r) {
        for (std::size_t i = 0; i < grid[r].size(); ++i) {
            os << std::left << std::setw(static_cast<int>(width[i])) << grid[r][i];
            os << (i + 1 < grid[r].size() ? "  " : "\n");
        }
        if (r == 0) {
            std::size_t total = 0;
            for (auto w : width) total += w + 2;
            os << std::string(total - 2, '-') << '\n';
        }
    }
    return os.str();
}

std::string_view outcome_key(Outcome o) {
    switch (o) {
        case Outcome::TestScore: return "test_score";
        case Outcome::Interest: return "interest";
        case Outcome::SelfEfficacy: return "self_efficacy";
    }
    return "?";
}

std::vector<OutcomeCorrelation> outcome_correlations(
    const std::string& source, const std::map<Component, std::map<std::string, double>>& teacher_scores,
    const std::vector<StudentRecord>& students) {
    if (students.empty()) throw DataError("no student records to correlate");
    std::vector<OutcomeCorrelation> out;
    for (const auto& [component, scores] : teacher_scores) {
        for (Outcome o : kOutcomes) {
            std::vector<double> x, y;
            for (const auto& s : students) {
                auto it = scores.find(s.teacher_id);
                if (it == scores.end()) continue;
                x.push_back(it->second);
                y.push_back(o == Outcome::TestScore ? s.test_score
                                                    : (o == Outcome::Interest ? s.interest : s.self_efficacy));
            }
            out.push_back({source, component, o, pearson_r(x, y)});
        }
    }
    return out;
}

}  // namespace dfm
