#include "pgnn/config.hpp"

#include <cctype>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace pgnn {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = 0;
    std::size_t e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

unsigned long long parse_count(const std::string& key, const std::string& value) {
    if (value.empty() || value[0] == '-')
        throw std::runtime_error("config: " + key + " expects a non-negative integer, got '" +
                                 value + "'");
    std::size_t used = 0;
    unsigned long long parsed = 0;
    try {
        parsed = std::stoull(value, &used);
    } catch (const std::exception&) {
        throw std::runtime_error("config: " + key + " expects an integer, got '" + value + "'");
    }
    if (used != value.size())
        throw std::runtime_error("config: trailing characters in " + key + " value '" + value +
                                 "'");
    return parsed;
}

double parse_real(const std::string& key, const std::string& value) {
    std::size_t used = 0;
    double parsed = 0.0;
    try {
        parsed = std::stod(value, &used);
    } catch (const std::exception&) {
        throw std::runtime_error("config: " + key + " expects a number, got '" + value + "'");
    }
    if (used != value.size())
        throw std::runtime_error("config: trailing characters in " + key + " value '" + value +
                                 "'");
    if (!std::isfinite(parsed))
        throw std::runtime_error("config: " + key + " must be finite");
    return parsed;
}

std::string format_real(double v) {
    std::ostringstream out;
    out << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
    return out.str();
}

struct Field {
    const char* name;
    std::function<std::string(const ExperimentConfig&)> get;
    std::function<void(ExperimentConfig&, const std::string&)> set;
};

// One table drives both the writer and the parser so the snapshot format and
// the accepted keys cannot drift apart.
const std::vector<Field>& fields() {
    auto count_field = [](const char* name, std::size_t ExperimentConfig::*member) {
        return Field{name,
                     [member](const ExperimentConfig& c) { return std::to_string(c.*member); },
                     [name, member](ExperimentConfig& c, const std::string& v) {
                         c.*member = static_cast<std::size_t>(parse_count(name, v));
                     }};
    };
    auto real_field = [](const char* name, double ExperimentConfig::*member) {
        return Field{name,
                     [member](const ExperimentConfig& c) { return format_real(c.*member); },
                     [name, member](ExperimentConfig& c, const std::string& v) {
                         c.*member = parse_real(name, v);
                     }};
    };
    static const std::vector<Field> table = {
        Field{"seed",
              [](const ExperimentConfig& c) { return std::to_string(c.seed); },
              [](ExperimentConfig& c, const std::string& v) { c.seed = parse_count("seed", v); }},
        count_field("image_size", &ExperimentConfig::image_size),
        count_field("num_classes", &ExperimentConfig::num_classes),
        count_field("dataset_size", &ExperimentConfig::dataset_size),
        Field{"patch_mode",
              [](const ExperimentConfig& c) { return c.patch_mode; },
              [](ExperimentConfig& c, const std::string& v) { c.patch_mode = v; }},
        count_field("grid_side", &ExperimentConfig::grid_side),
        count_field("proposal_top_k", &ExperimentConfig::proposal_top_k),
        count_field("proposal_node_size", &ExperimentConfig::proposal_node_size),
        real_field("lambda_erase", &ExperimentConfig::lambda_erase),
        real_field("lambda_preserve", &ExperimentConfig::lambda_preserve),
        real_field("lambda_smoothness", &ExperimentConfig::lambda_smoothness),
        real_field("lambda_classification", &ExperimentConfig::lambda_classification),
        real_field("attention_threshold", &ExperimentConfig::attention_threshold),
        real_field("background_threshold", &ExperimentConfig::background_threshold),
        count_field("epochs", &ExperimentConfig::epochs),
        count_field("warmup_epochs", &ExperimentConfig::warmup_epochs),
        real_field("learning_rate", &ExperimentConfig::learning_rate),
        count_field("batch_size", &ExperimentConfig::batch_size),
        count_field("segmenter_epochs", &ExperimentConfig::segmenter_epochs),
        real_field("segmenter_learning_rate", &ExperimentConfig::segmenter_learning_rate),
        count_field("attention_dim", &ExperimentConfig::attention_dim),
    };
    return table;
}

[[noreturn]] void invalid(const std::string& message) {
    throw std::invalid_argument("config: " + message);
}

} // namespace

void ExperimentConfig::validate() const {
    if (num_classes < 1 || num_classes > 4)
        invalid("num_classes must be between 1 and 4, got " + std::to_string(num_classes));
    if (dataset_size < 1) invalid("dataset_size must be at least 1");
    if (image_size < 24)
        invalid("image_size must be at least 24, got " + std::to_string(image_size));
    if (patch_mode != "grid" && patch_mode != "proposals")
        invalid("patch_mode must be 'grid' or 'proposals', got '" + patch_mode + "'");
    if (patch_mode == "grid") {
        if (grid_side < 1) invalid("grid_side must be at least 1");
        if (image_size < 8 * grid_side)
            invalid("image_size " + std::to_string(image_size) + " cannot hold a " +
                    std::to_string(grid_side) + "x" + std::to_string(grid_side) +
                    " patch grid (needs at least " + std::to_string(8 * grid_side) + ")");
    } else {
        if (proposal_top_k < 1) invalid("proposal_top_k must be at least 1");
        if (proposal_node_size < 8) invalid("proposal_node_size must be at least 8");
    }
    for (auto [name, value] : {std::pair<const char*, double>{"lambda_erase", lambda_erase},
                               {"lambda_preserve", lambda_preserve},
                               {"lambda_smoothness", lambda_smoothness},
                               {"lambda_classification", lambda_classification}}) {
        if (value < 0.0) invalid(std::string(name) + " must be non-negative");
    }
    if (attention_threshold <= 0.0 || attention_threshold >= 1.0)
        invalid("attention_threshold must lie in (0,1)");
    if (background_threshold <= 0.0 || background_threshold >= 1.0)
        invalid("background_threshold must lie in (0,1)");
    if (epochs < 1) invalid("epochs must be at least 1");
    // warmup_epochs == epochs is a legal schedule: the run then trains with
    // the warm-up loss (classification only, class embeddings frozen)
    // throughout and the complementary terms never activate.
    if (warmup_epochs > epochs)
        invalid("warmup_epochs cannot exceed epochs, got " +
                std::to_string(warmup_epochs) + " of " + std::to_string(epochs));
    if (segmenter_epochs < 1) invalid("segmenter_epochs must be at least 1");
    if (learning_rate <= 0.0) invalid("learning_rate must be positive");
    if (segmenter_learning_rate <= 0.0) invalid("segmenter_learning_rate must be positive");
    if (batch_size < 2) invalid("batch_size must be at least 2 so batches span images");
    if (attention_dim < 1) invalid("attention_dim must be at least 1");
}

LossWeights ExperimentConfig::loss_weights() const {
    LossWeights w;
    w.erase = lambda_erase;
    w.preserve = lambda_preserve;
    w.smoothness = lambda_smoothness;
    w.classification = lambda_classification;
    return w;
}

void set_config_value(ExperimentConfig& config, const std::string& key,
                      const std::string& value) {
    for (const Field& f : fields()) {
        if (key == f.name) {
            f.set(config, value);
            return;
        }
    }
    throw std::runtime_error("config: unknown key '" + key + "'");
}

ExperimentConfig parse_config(std::istream& in) {
    ExperimentConfig config;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("config: line " + std::to_string(line_no) +
                                     " is not a key=value pair: '" + line + "'");
        set_config_value(config, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return config;
}

ExperimentConfig load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open '" + path + "'");
    return parse_config(in);
}

void write_config(std::ostream& out, const ExperimentConfig& config) {
    for (const Field& f : fields()) out << f.name << " = " << f.get(config) << "\n";
}

void save_config_file(const std::string& path, const ExperimentConfig& config) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("config: cannot write '" + path + "'");
    write_config(out, config);
    if (!out) throw std::runtime_error("config: failed writing '" + path + "'");
}

} // namespace pgnn
