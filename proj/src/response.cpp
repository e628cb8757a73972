#include "r2d/response.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace r2d {

using nlohmann::json;

std::size_t NodeGrid::node_count() const {
    std::size_t n = 0;
    for (const auto& l : levels) {
        n += static_cast<std::size_t>(l.width) * static_cast<std::size_t>(l.height);
    }
    return n;
}

std::size_t NodeGrid::level_offset(std::size_t level) const {
    if (level >= levels.size()) {
        throw Error("level out of range");
    }
    std::size_t off = 0;
    for (std::size_t i = 0; i < level; ++i) {
        off += static_cast<std::size_t>(levels[i].width) * static_cast<std::size_t>(levels[i].height);
    }
    return off;
}

NodeLocation NodeGrid::locate(std::size_t node) const {
    std::size_t rest = node;
    for (std::size_t l = 0; l < levels.size(); ++l) {
        const std::size_t size =
            static_cast<std::size_t>(levels[l].width) * static_cast<std::size_t>(levels[l].height);
        if (rest < size) {
            const auto w = static_cast<std::size_t>(levels[l].width);
            return {l, static_cast<int>(rest / w), static_cast<int>(rest % w)};
        }
        rest -= size;
    }
    throw Error("node index out of range");
}

std::array<double, 2> NodeGrid::center(std::size_t node) const {
    const NodeLocation loc = locate(node);
    const double s = levels[loc.level].stride;
    return {(loc.col + 0.5) * s, (loc.row + 0.5) * s};
}

double NodeGrid::stride_of(std::size_t node) const { return levels[locate(node).level].stride; }

void NodeGrid::validate() const {
    if (levels.empty()) {
        throw Error("grid has no levels");
    }
    double prev = 0.0;
    for (const auto& l : levels) {
        if (l.width < 1 || l.height < 1) {
            throw Error("grid level must be at least 1x1");
        }
        if (!(l.stride > prev)) {
            throw Error("strides must be positive and strictly increasing");
        }
        prev = l.stride;
    }
}

void ResponseBundle::validate() const {
    grid.validate();
    const std::size_t n = grid.node_count();
    if (cls.num_classes == 0) {
        throw Error("no classes");
    }
    if (cls.logits.size() != n * cls.num_classes) {
        throw Error("classification response does not match grid");
    }
    if (reg.bins < 2) {
        throw Error("edge distributions need at least 2 bins");
    }
    if (reg.logits.size() != n * reg.node_stride()) {
        throw Error("regression response does not match grid");
    }
    if (!(reg.bin_width > 0.0)) {
        throw Error("bin_width must be positive");
    }
    auto finite = [](double v) { return std::isfinite(v); };
    if (!std::all_of(cls.logits.begin(), cls.logits.end(), finite) ||
        !std::all_of(reg.logits.begin(), reg.logits.end(), finite)) {
        throw Error("non-finite logit");
    }
}

QualityScores classification_quality(const ClassificationResponse& cls) {
    if (cls.num_classes == 0) {
        throw Error("no classes");
    }
    QualityScores q{Head::cls, Vec(cls.node_count())};
    for (std::size_t i = 0; i < q.values.size(); ++i) {
        const auto z = cls.node(i);
        q.values[i] = sigmoid(*std::max_element(z.begin(), z.end()));
    }
    return q;
}

namespace {

double max_edge_entropy(const RegressionResponse& reg, std::size_t node, Vec& scratch) {
    double best = 0.0;
    scratch.resize(reg.bins);
    for (std::size_t e = 0; e < kEdges; ++e) {
        softmax_into(reg.edge(node, e), 1.0, scratch);
        best = std::max(best, entropy_bits(scratch));
    }
    return best;
}

}  // namespace

QualityScores regression_quality(const QualityScores& q_cls, const RegressionResponse& reg) {
    if (q_cls.values.size() != reg.node_count()) {
        throw Error("quality/regression node count mismatch");
    }
    QualityScores q{Head::reg, Vec(q_cls.values.size())};
    Vec scratch;
    for (std::size_t i = 0; i < q.values.size(); ++i) {
        const double c = q_cls.values[i];
        if (c >= 1.0) {
            throw Error("degenerate confidence");
        }
        q.values[i] = -std::log1p(-c) * max_edge_entropy(reg, i, scratch);
    }
    return q;
}

QualityScores regression_quality(const ClassificationResponse& cls, const RegressionResponse& reg) {
    if (cls.node_count() != reg.node_count()) {
        throw Error("quality/regression node count mismatch");
    }
    QualityScores q{Head::reg, Vec(cls.node_count())};
    Vec scratch;
    for (std::size_t i = 0; i < q.values.size(); ++i) {
        const auto z = cls.node(i);
        const double top = *std::max_element(z.begin(), z.end());
        // -ln(1 - sigmoid(x)) == softplus(x), evaluated without forming 1 - sigmoid.
        const double softplus = top > 0.0 ? top + std::log1p(std::exp(-top)) : std::log1p(std::exp(top));
        q.values[i] = softplus * max_edge_entropy(reg, i, scratch);
    }
    return q;
}

double expected_edge_distance(std::span<const double> edge_logits, double bin_width, double stride) {
    const Vec p = softmax(edge_logits, 1.0);
    double mean = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
        mean += static_cast<double>(k) * p[k];
    }
    return mean * bin_width * stride;
}

DecodedBox decode_box(std::size_t node, const NodeGrid& grid, const RegressionResponse& reg,
                      double score) {
    if (node >= grid.node_count() || node >= reg.node_count()) {
        throw Error("node index out of range");
    }
    const auto [cx, cy] = grid.center(node);
    const double s = grid.stride_of(node);
    const double top = expected_edge_distance(reg.edge(node, kTop), reg.bin_width, s);
    const double bottom = expected_edge_distance(reg.edge(node, kBottom), reg.bin_width, s);
    const double left = expected_edge_distance(reg.edge(node, kLeft), reg.bin_width, s);
    const double right = expected_edge_distance(reg.edge(node, kRight), reg.bin_width, s);
    return {node, cx - left, cy - top, cx + right, cy + bottom, score};
}

double iou(const DecodedBox& a, const DecodedBox& b) {
    const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    if (iw <= 0.0 || ih <= 0.0) {
        return 0.0;
    }
    const double inter = iw * ih;
    const double uni = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

std::string bundle_to_json(const ResponseBundle& bundle, int indent) {
    json j;
    json levels = json::array();
    for (const auto& l : bundle.grid.levels) {
        levels.push_back({{"w", l.width}, {"h", l.height}, {"stride", l.stride}});
    }
    j["grid"] = {{"levels", levels}};
    json cls = json::array();
    for (std::size_t i = 0; i < bundle.cls.node_count(); ++i) {
        const auto z = bundle.cls.node(i);
        cls.push_back(json(Vec(z.begin(), z.end())));
    }
    j["cls"] = std::move(cls);
    json nodes = json::array();
    for (std::size_t i = 0; i < bundle.reg.node_count(); ++i) {
        json edges = json::array();
        for (std::size_t e = 0; e < kEdges; ++e) {
            const auto p = bundle.reg.edge(i, e);
            edges.push_back(json(Vec(p.begin(), p.end())));
        }
        nodes.push_back(std::move(edges));
    }
    j["reg"] = {{"bins", bundle.reg.bins}, {"bin_width", bundle.reg.bin_width}, {"nodes", std::move(nodes)}};
    j["role"] = bundle.role == Role::teacher ? "teacher" : "student";
    return j.dump(indent);
}

namespace {

ResponseBundle bundle_from_value(const json& j) {
    ResponseBundle b;
    for (const auto& l : j.at("grid").at("levels")) {
        b.grid.levels.push_back({l.at("w").get<int>(), l.at("h").get<int>(), l.at("stride").get<double>()});
    }
    const auto& cls = j.at("cls");
    if (!cls.is_array()) {
        throw Error("cls must be an array");
    }
    b.cls.num_classes = cls.empty() ? 0 : cls.front().size();
    for (const auto& node : cls) {
        if (node.size() != b.cls.num_classes) {
            throw Error("every node needs the same number of class logits");
        }
        for (const auto& v : node) {
            b.cls.logits.push_back(v.get<double>());
        }
    }
    const auto& reg = j.at("reg");
    b.reg.bins = reg.at("bins").get<std::size_t>();
    b.reg.bin_width = reg.at("bin_width").get<double>();
    for (const auto& node : reg.at("nodes")) {
        if (node.size() != kEdges) {
            throw Error("every node needs exactly 4 edge distributions");
        }
        for (const auto& edge : node) {
            if (edge.size() != b.reg.bins) {
                throw Error("edge distribution length differs from bins");
            }
            for (const auto& v : edge) {
                b.reg.logits.push_back(v.get<double>());
            }
        }
    }
    if (j.contains("role")) {
        const auto role = j.at("role").get<std::string>();
        if (role == "teacher") {
            b.role = Role::teacher;
        } else if (role == "student") {
            b.role = Role::student;
        } else {
            throw Error("unknown role '" + role + "'");
        }
    }
    b.validate();
    return b;
}

}  // namespace

ResponseBundle bundle_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError("invalid JSON at byte " + std::to_string(e.byte) + ": " + e.what());
    }
    try {
        return bundle_from_value(j);
    } catch (const json::exception& e) {
        throw ParseError(std::string("malformed bundle: ") + e.what());
    }
}

ResponseBundle load_bundle(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ParseError("cannot open " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return bundle_from_json(ss.str());
}

void save_bundle(const ResponseBundle& bundle, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw Error("cannot write " + path.string());
    }
    out << bundle_to_json(bundle, 1) << '\n';
}

}  // namespace r2d
