#include "pgnn/sweep.hpp"

#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "pgnn/dataset.hpp"
#include "pgnn/train.hpp"

namespace pgnn {

namespace {

std::string real_str(double v) {
    std::ostringstream out;
    out << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
    return out.str();
}

// The grid sides behind the patch-count rows 4, 16, 36 and 64.
constexpr std::size_t kGridSides[4] = {2, 4, 6, 8};

// Weight rows tried on the lambda axis; the third row is the default.
const std::vector<std::vector<double>>& lambda_rows() {
    static const std::vector<std::vector<double>> rows = {
        {1.0, 1.0, 1.0, 1.0}, {1.0, 1.0, 1.0, 0.8}, {1.0, 1.0, 0.8, 1.0},
        {1.0, 0.8, 1.0, 1.0}, {0.8, 1.0, 1.0, 1.0},
    };
    return rows;
}

std::string join_lambdas(const std::vector<double>& l) {
    std::string out;
    for (std::size_t i = 0; i < l.size(); ++i)
        out += (i ? "," : "") + real_str(l[i]);
    return out;
}

void run_cell(const ExperimentConfig& config, SweepRow& row) {
    const std::vector<SyntheticScene> dataset = generate_dataset(config);
    const PgnnTrainResult trained = train_pgnn(config, dataset);
    const EvalResult eval = evaluate_labels(trained.pseudo_labels,
                                            ground_truth_store(dataset),
                                            config.num_classes);
    row.precision = eval.precision;
    row.recall = eval.recall;
    row.ok = true;
}

} // namespace

SweepAxis parse_sweep_axis(const std::string& name) {
    if (name == "patch_count") return SweepAxis::patch_count;
    if (name == "lambda") return SweepAxis::lambda;
    throw std::runtime_error("sweep: unknown axis '" + name +
                             "' (expected patch_count or lambda)");
}

bool SweepReport::all_ok() const {
    for (const SweepRow& row : rows)
        if (!row.ok) return false;
    return true;
}

SweepReport run_sweep(const ExperimentConfig& base, SweepAxis axis) {
    SweepReport report;
    report.axis = axis;

    if (axis == SweepAxis::patch_count) {
        for (std::size_t side : kGridSides) {
            SweepRow row;
            row.patches = side * side;
            row.label = "patches=" + std::to_string(row.patches);
            ExperimentConfig config = base;
            config.patch_mode = "grid";
            config.grid_side = side;
            // The 8x8 grid needs 64-pixel images; every cell gets the same
            // size so rows stay comparable.
            config.image_size = std::max<std::size_t>(base.image_size, 64);
            try {
                config.validate();
                run_cell(config, row);
            } catch (const std::exception& e) {
                row.error = e.what();
            }
            report.rows.push_back(std::move(row));
        }
        return report;
    }

    for (const std::vector<double>& lambdas : lambda_rows()) {
        SweepRow row;
        row.lambdas = lambdas;
        row.label = "lambda=" + join_lambdas(lambdas);
        ExperimentConfig config = base;
        config.lambda_erase = lambdas[0];
        config.lambda_preserve = lambdas[1];
        config.lambda_smoothness = lambdas[2];
        config.lambda_classification = lambdas[3];
        try {
            config.validate();
            run_cell(config, row);
        } catch (const std::exception& e) {
            row.error = e.what();
        }
        report.rows.push_back(std::move(row));
    }
    return report;
}

void write_sweep_csv(std::ostream& out, const SweepReport& report) {
    if (report.axis == SweepAxis::patch_count)
        out << "patches,precision,recall\n";
    else
        out << "lambda1,lambda2,lambda3,lambda4,precision,recall\n";
    for (const SweepRow& row : report.rows) {
        if (!row.ok) {
            out << "# error " << row.label << ": " << row.error << "\n";
            continue;
        }
        if (report.axis == SweepAxis::patch_count)
            out << row.patches << ',';
        else
            out << join_lambdas(row.lambdas) << ',';
        out << real_str(row.precision) << ',' << real_str(row.recall) << "\n";
    }
}

void save_sweep_csv(const std::string& path, const SweepReport& report) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("sweep: cannot write '" + path + "'");
    write_sweep_csv(out, report);
    if (!out) throw std::runtime_error("sweep: failed writing '" + path + "'");
}

} // namespace pgnn
