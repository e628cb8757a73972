#include "r2d/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <future>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "r2d/losses.hpp"
#include "r2d/regions.hpp"
#include "r2d/response.hpp"
#include "r2d/scenario.hpp"
#include "r2d/sim.hpp"

namespace r2d {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

struct Options {
    std::optional<std::int64_t> seed;
    std::string out;
    std::string format = "json";
    bool pretty = false;

    RegionConfig regions;
    LossWeights weights;
    std::string region_mode = "refine";

    std::vector<std::string> inputs;
    std::string raster_dir;
    bool gradcheck = false;
    double fd_step = 1e-5;

    std::vector<int> team_sizes = {9, 9, 9, 9, 7, 7};
    int images = 120;

    std::string protocol = "r2d";
    int steps = 2;
    bool compare = false;
    int jobs = 1;
    ProtocolConfig proto;
    WorldConfig world;
};

void emit(const Options& o, const std::string& text, std::ostream& out) {
    if (o.out.empty()) {
        out << text;
        return;
    }
    std::ofstream f(o.out, std::ios::binary);
    if (!f) {
        throw Error("cannot write " + o.out);
    }
    f << text;
}

std::uint64_t resolve_seed(const Options& o, std::uint64_t fallback) {
    if (o.seed) {
        return static_cast<std::uint64_t>(*o.seed);
    }
    if (const char* env = std::getenv("R2D_SEED"); env != nullptr && *env != '\0') {
        char* end = nullptr;
        const long long v = std::strtoll(env, &end, 10);
        if (*end != '\0') {
            throw ParseError(std::string("R2D_SEED is not an integer: ") + env);
        }
        return static_cast<std::uint64_t>(v);
    }
    return fallback;
}

std::string fixed(double v, int width, int precision = 6) {
    std::ostringstream s;
    s << std::setw(width) << std::fixed << std::setprecision(precision) << v;
    return s.str();
}

int cmd_quality(const Options& o, std::ostream& out) {
    const ResponseBundle b = load_bundle(o.inputs.at(0));
    const QualityScores qc = classification_quality(b.cls);
    const QualityScores qr = regression_quality(b.cls, b.reg);
    std::ostringstream s;
    if (o.pretty) {
        s << "  node         Q_cls         Q_reg\n";
        for (std::size_t i = 0; i < qc.values.size(); ++i) {
            s << std::setw(6) << i << fixed(qc.values[i], 14) << fixed(qr.values[i], 14) << '\n';
        }
    } else if (o.format == "csv") {
        s << "node,q_cls,q_reg\n";
        for (std::size_t i = 0; i < qc.values.size(); ++i) {
            s << i << ',' << format_double(qc.values[i]) << ',' << format_double(qr.values[i]) << '\n';
        }
    } else {
        ojson j;
        j["q_cls"] = qc.values;
        j["q_reg"] = qr.values;
        s << j.dump() << '\n';
    }
    emit(o, s.str(), out);
    return kExitOk;
}

int cmd_regions(const Options& o, std::ostream& out) {
    const ResponseBundle b = load_bundle(o.inputs.at(0));
    const RefinedRegions r = refine_regions(b, o.regions, region_mode_from_string(o.region_mode));
    if (!o.raster_dir.empty()) {
        fs::create_directories(o.raster_dir);
        for (std::size_t l = 0; l < b.grid.levels.size(); ++l) {
            export_region_raster(r.cls, b.grid, l, fs::path(o.raster_dir) / ("cls_level" + std::to_string(l) + ".csv"));
            export_region_raster(r.reg, b.grid, l, fs::path(o.raster_dir) / ("reg_level" + std::to_string(l) + ".csv"));
        }
    }
    std::ostringstream s;
    if (o.pretty) {
        s << "candidates " << r.cls.candidates.size() << '\n'
          << "cls high   " << r.cls.high.size() << "  low " << r.cls.low.size() << '\n'
          << "reg high   " << r.reg.high.size() << "  low " << r.reg.low.size() << '\n'
          << "nms high   " << r.reg_high.kept.size() << "  low " << r.reg_low.kept.size() << '\n';
    } else if (o.format == "csv") {
        std::vector<int> cls(b.grid.node_count(), 0);
        std::vector<int> reg(b.grid.node_count(), 0);
        for (auto i : r.cls.low) cls[i] = 1;
        for (auto i : r.cls.high) cls[i] = 2;
        for (auto i : r.reg.low) reg[i] = 1;
        for (auto i : r.reg.high) reg[i] = 2;
        s << "node,cls,reg\n";
        for (std::size_t i = 0; i < cls.size(); ++i) {
            s << i << ',' << cls[i] << ',' << reg[i] << '\n';
        }
    } else {
        s << regions_to_json(r) << '\n';
    }
    emit(o, s.str(), out);
    return kExitOk;
}

int cmd_loss(const Options& o, std::ostream& out) {
    const ResponseBundle teacher = load_bundle(o.inputs.at(0));
    const ResponseBundle student = load_bundle(o.inputs.at(1));
    check_aligned(teacher, student);
    const RegionMode mode = region_mode_from_string(o.region_mode);
    const DistillLossReport rep = total_distill_loss(teacher, student, o.regions, o.weights, mode);
    std::optional<GradCheckResult> gc;
    if (o.gradcheck) {
        gc = check_distill_gradients(teacher, student, o.regions, o.weights, o.fd_step, mode);
    }
    std::ostringstream s;
    if (o.pretty) {
        s << report_to_text(rep);
        if (gc) {
            s << std::left << std::setw(16) << "max_rel_error" << "= " << format_double(gc->max_rel_error) << '\n';
        }
    } else if (o.format == "csv") {
        s << report_csv_header() << (gc ? ",max_rel_error" : "") << '\n';
        s << report_to_csv_row(rep);
        if (gc) {
            s << ',' << format_double(gc->max_rel_error);
        }
        s << '\n';
    } else {
        ojson j = ojson::parse(report_to_json(rep));
        if (gc) {
            j["gradcheck"] = {{"max_rel_error", gc->max_rel_error},
                              {"max_abs_error", gc->max_abs_error},
                              {"coordinates", gc->coordinates}};
        }
        s << j.dump() << '\n';
    }
    emit(o, s.str(), out);
    return gc && !(gc->max_rel_error < 1e-6) ? kExitCheckFailed : kExitOk;
}

int cmd_simulate(Options o, std::ostream& out) {
    o.proto.seed = resolve_seed(o, o.proto.seed);
    o.proto.weights = o.weights;
    o.proto.regions = o.regions;
    o.proto.region_mode = region_mode_from_string(o.region_mode);
    const SyntheticWorld world(o.world);
    o.proto.steps = contiguous_steps(o.world, o.steps);

    std::vector<Protocol> protocols;
    if (o.compare) {
        protocols = {Protocol::joint, Protocol::finetune, Protocol::r2d};
    } else {
        protocols = {protocol_from_string(o.protocol)};
    }
    auto run = [&](Protocol p) {
        ProtocolConfig pc = o.proto;
        pc.protocol = p;
        return run_protocol(pc, world);
    };
    std::vector<SimMetrics> results;
    if (o.jobs > 1 && protocols.size() > 1) {
        std::vector<std::future<SimMetrics>> fut;
        for (Protocol p : protocols) {
            fut.push_back(std::async(std::launch::async, run, p));
        }
        for (auto& f : fut) {
            results.push_back(f.get());
        }
    } else {
        for (Protocol p : protocols) {
            results.push_back(run(p));
        }
    }

    std::ostringstream s;
    if (o.pretty) {
        std::map<std::pair<int, int>, std::map<std::string, double>> table;
        for (const auto& m : results) {
            for (const auto& r : m.records) {
                table[{r.step, r.group}][r.protocol] = r.score;
            }
        }
        s << "step group";
        for (Protocol p : protocols) {
            s << std::setw(10) << to_string(p);
        }
        s << '\n';
        for (const auto& [key, row] : table) {
            s << std::setw(4) << key.first << std::setw(6) << key.second;
            for (Protocol p : protocols) {
                const auto it = row.find(to_string(p));
                s << (it == row.end() ? std::string(10 - 1, ' ') + "-" : fixed(it->second, 10, 4));
            }
            s << '\n';
        }
    } else if (o.format == "csv") {
        s << "protocol,step,group,score,forgetting\n";
        for (const auto& m : results) {
            const std::string csv = metrics_to_csv(m);
            s << csv.substr(csv.find('\n') + 1);
        }
    } else if (results.size() == 1) {
        s << metrics_to_json(results[0]) << '\n';
    } else {
        ojson j;
        for (std::size_t k = 0; k < results.size(); ++k) {
            j[to_string(protocols[k])] = ojson::parse(metrics_to_json(results[k]));
        }
        s << j.dump() << '\n';
    }
    emit(o, s.str(), out);
    return kExitOk;
}

int cmd_split(const Options& o, std::ostream& out) {
    const ScenarioSpec spec = load_scenario_spec(o.inputs.at(0));
    const AnnotationSet source = load_annotations(spec.source);
    const fs::path dir = o.out.empty() ? fs::path(spec.name + "_split") : fs::path(o.out);
    const SplitManifest m = split_by_steps(source, spec, dir);
    const SplitReport rep = validate_split(m, dir, source);
    if (o.pretty) {
        for (std::size_t k = 0; k < m.steps.size(); ++k) {
            out << "step " << k + 1 << ": " << m.steps[k].classes.size() << " classes, " << m.steps[k].images
                << " images, " << m.steps[k].annotations << " annotations -> " << (dir / m.steps[k].path).string()
                << '\n';
        }
    } else {
        out << manifest_to_json(m);
    }
    if (!rep.pass) {
        throw SpecError("split validation failed: " + rep.errors.front());
    }
    return kExitOk;
}

int cmd_self_test(const Options& o, std::ostream& out) {
    const RegionConfig rc;
    const LossWeights w;
    const ProtocolConfig pc;
    const std::vector<std::pair<std::string, bool>> checks = {
        {"theta == 0.05", rc.theta == 0.05},
        {"nms_iou == 0.6", rc.nms_iou == 0.6},
        {"t1 == 10", w.t1 == 10.0},
        {"t2 == 5", w.t2 == 5.0},
        {"lambda1..6 == 1", w.lambda1 == 1.0 && w.lambda2 == 1.0 && w.lambda3 == 1.0 && w.lambda4 == 1.0 &&
                                w.lambda5 == 1.0 && w.lambda6 == 1.0},
        {"cli theta default", o.regions.theta == rc.theta},
        {"cli t1/t2 default", o.weights.t1 == w.t1 && o.weights.t2 == w.t2},
        {"cli region mode default", o.region_mode == "refine"},
        {"protocol region mode default", pc.region_mode == RegionMode::refine},
    };
    bool pass = true;
    ojson j = ojson::object();
    for (const auto& [name, ok] : checks) {
        j[name] = ok;
        pass = pass && ok;
    }
    j["pass"] = pass;
    emit(o, j.dump(o.pretty ? 2 : -1) + "\n", out);
    return pass ? kExitOk : kExitCheckFailed;
}

int cmd_fixture(const Options& o, std::ostream& out) {
    const auto [teacher, student] = fixture_bundles(resolve_seed(o, 11));
    const fs::path dir = o.out.empty() ? fs::path(".") : fs::path(o.out);
    fs::create_directories(dir);
    save_bundle(teacher, dir / "teacher.json");
    save_bundle(student, dir / "student.json");
    out << (dir / "teacher.json").string() << '\n' << (dir / "student.json").string() << '\n';
    return kExitOk;
}

int cmd_toy_source(const Options& o, std::ostream& out) {
    const AnnotationSet set = make_toy_source(o.team_sizes, o.images, resolve_seed(o, 5));
    emit(o, annotations_to_json(set), out);
    return kExitOk;
}

int cmd_golden(const Options& o, std::ostream& out) {
    const SimGolden g = compute_golden(o.world, resolve_seed(o, ProtocolConfig{}.seed), o.jobs);
    emit(o, golden_to_json(g), out);
    return kExitOk;
}

void add_region_flags(CLI::App* c, Options& o) {
    c->add_option("--theta", o.regions.theta, "candidate threshold on Q_cls")->capture_default_str();
    c->add_option("--nms-iou", o.regions.nms_iou, "NMS IoU threshold")->capture_default_str();
    c->add_option("--em-iters", o.regions.em_max_iters, "EM iteration cap")->capture_default_str();
    c->add_option("--em-tol", o.regions.em_tol, "EM log-likelihood tolerance")->capture_default_str();
    c->add_option("--region-mode", o.region_mode, "refine | cand | all")
        ->check(CLI::IsMember({"refine", "cand", "all"}))
        ->capture_default_str();
}

void add_weight_flags(CLI::App* c, Options& o) {
    c->add_option("--lambda1", o.weights.lambda1)->capture_default_str();
    c->add_option("--lambda2", o.weights.lambda2)->capture_default_str();
    c->add_option("--lambda3", o.weights.lambda3)->capture_default_str();
    c->add_option("--lambda4", o.weights.lambda4)->capture_default_str();
    c->add_option("--lambda5", o.weights.lambda5)->capture_default_str();
    c->add_option("--lambda6", o.weights.lambda6)->capture_default_str();
    c->add_option("--t1", o.weights.t1, "temperature for high-value nodes")->capture_default_str();
    c->add_option("--t2", o.weights.t2, "temperature for low-value nodes")->capture_default_str();
}

void add_world_flags(CLI::App* c, Options& o) {
    c->add_option("--world-seed", o.world.seed)->capture_default_str();
    c->add_option("--classes", o.world.num_classes)->capture_default_str();
    c->add_option("--class-dim", o.world.class_dim)->capture_default_str();
    c->add_option("--homogeneity", o.world.homogeneity)->capture_default_str();
    c->add_option("--noise", o.world.noise)->capture_default_str();
    c->add_option("--train-scenes", o.world.train_scenes)->capture_default_str();
    c->add_option("--eval-scenes", o.world.eval_scenes)->capture_default_str();
    c->add_option("--past-rate", o.world.past_object_rate, "unannotated earlier-class objects")
        ->capture_default_str();
    c->add_option("--jobs", o.jobs, "parallel independent runs")->check(CLI::PositiveNumber)->capture_default_str();
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    Options o;
    CLI::App app{"Refined response distillation toolkit", "r2d"};
    app.require_subcommand(1);
    app.fallthrough();
    app.add_option("--seed", o.seed, "RNG seed (falls back to R2D_SEED)");
    app.add_option("--out", o.out, "output file (directory for split)");
    app.add_option("--format", o.format, "json | csv")->check(CLI::IsMember({"json", "csv"}));
    app.add_flag("--pretty", o.pretty, "human-readable table");

    auto* quality = app.add_subcommand("quality", "per-node Q_cls and Q_reg of a bundle");
    quality->add_option("bundle", o.inputs)->required()->expected(1);

    auto* regions = app.add_subcommand("regions", "candidate and refined distillation regions");
    regions->add_option("bundle", o.inputs)->required()->expected(1);
    regions->add_option("--raster", o.raster_dir, "write per-level CSV rasters here");
    add_region_flags(regions, o);

    auto* loss = app.add_subcommand("loss", "distillation loss report for a teacher/student pair");
    loss->add_option("bundles", o.inputs, "teacher student")->required()->expected(2);
    loss->add_flag("--gradcheck", o.gradcheck, "compare analytic gradients with finite differences");
    loss->add_option("--fd-step", o.fd_step)->capture_default_str();
    add_region_flags(loss, o);
    add_weight_flags(loss, o);

    auto* simulate = app.add_subcommand("simulate", "incremental training on the synthetic world");
    simulate->add_option("--protocol", o.protocol)
        ->check(CLI::IsMember({"joint", "finetune", "r2d"}))
        ->capture_default_str();
    simulate->add_option("--steps", o.steps, "number of class groups")->capture_default_str();
    simulate->add_flag("--compare", o.compare, "run joint, finetune and r2d side by side");
    simulate->add_option("--epochs", o.proto.epochs)->capture_default_str();
    simulate->add_option("--lr", o.proto.learning_rate)->capture_default_str();
    simulate->add_option("--batch", o.proto.batch_size)->capture_default_str();
    add_region_flags(simulate, o);
    add_weight_flags(simulate, o);
    add_world_flags(simulate, o);

    auto* split = app.add_subcommand("split", "cut a COCO source into incremental steps");
    split->add_option("spec", o.inputs)->required()->expected(1);

    app.add_subcommand("self-test", "check that defaults match the reference settings");

    auto* fixture = app.add_subcommand("fixture", "write a toy teacher/student bundle pair (--out is a directory)");

    auto* toy = app.add_subcommand("toy-source", "synthetic COCO source with one class per player");
    toy->add_option("--teams", o.team_sizes, "players per team")->delimiter(',')->capture_default_str();
    toy->add_option("--images", o.images)->check(CLI::PositiveNumber)->capture_default_str();

    auto* golden = app.add_subcommand("golden", "golden-run summary used by the acceptance suite");
    add_world_flags(golden, o);

    std::vector<std::string> rev(args.rbegin(), args.rend());
    try {
        app.parse(rev);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitParse;
    }

    try {
        if (*quality) return cmd_quality(o, out);
        if (*regions) return cmd_regions(o, out);
        if (*loss) return cmd_loss(o, out);
        if (*simulate) return cmd_simulate(o, out);
        if (*split) return cmd_split(o, out);
        if (*golden) return cmd_golden(o, out);
        if (*fixture) return cmd_fixture(o, out);
        if (*toy) return cmd_toy_source(o, out);
        return cmd_self_test(o, out);
    } catch (const ParseError& e) {
        err << "error: " << e.what() << '\n';
        return kExitParse;
    } catch (const MisalignedError& e) {
        err << "error: " << e.what() << '\n';
        return kExitMisaligned;
    } catch (const DivergenceError& e) {
        err << "error: " << e.what() << '\n';
        return kExitDivergence;
    } catch (const SpecError& e) {
        err << "error: " << e.what() << '\n';
        return kExitSpec;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitParse;
    }
}

}  // namespace r2d
