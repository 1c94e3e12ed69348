#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "aggdet/aggdet.hpp"

namespace {

using namespace aggdet;

struct CommonOptions {
    std::optional<std::size_t> workers;
};

struct ConfigOptions {
    std::optional<std::string> profile;
    std::optional<std::string> config_file;
    std::optional<std::string> mode;
    bool no_arp_lq = false;
    bool no_aoc_vs = false;
    bool no_aoc_lq = false;
    std::optional<std::size_t> k;
    std::optional<double> alpha;
    std::optional<double> gamma;
    std::optional<double> temperature;
    std::optional<double> proposal_nms;
    std::optional<double> class_nms;
    std::optional<std::size_t> keep_max;
    std::optional<std::size_t> detections_per_image;
    std::optional<double> score_threshold;

    void add_to(CLI::App& app) {
        app.add_option("--profile", profile, "Hyper-parameter profile")->check(CLI::IsMember({"coco", "lvis"}));
        app.add_option("--config", config_file, "JSON config file overlaid on the profile")->check(CLI::ExistingFile);
        app.add_option("--mode", mode, "Detector architecture")->check(CLI::IsMember({"dense", "sparse"}));
        app.add_flag("--no-arp-lq", no_arp_lq, "Disable localization quality in proposal filtering");
        app.add_flag("--no-aoc-vs", no_aoc_vs, "Disable visual-similarity aggregation");
        app.add_flag("--no-aoc-lq", no_aoc_lq, "Disable quality regulation of classification");
        app.add_option("--k", k, "Neighbours in the localization quality");
        app.add_option("--alpha", alpha, "Weight of the prototype similarity");
        app.add_option("--gamma", gamma, "Exponent of the calibrated score in regulation");
        app.add_option("--temperature", temperature, "Sigmoid temperature (default: from the dump)");
        app.add_option("--proposal-nms", proposal_nms, "Proposal-stage NMS IoU threshold");
        app.add_option("--class-nms", class_nms, "Per-class NMS IoU threshold");
        app.add_option("--keep-max", keep_max, "Proposals kept after proposal NMS");
        app.add_option("--detections-per-image", detections_per_image, "Final detections per image");
        app.add_option("--score-threshold", score_threshold, "Minimum final score (exclusive)");
    }

    /// flags > config file > profile > dump temperature > defaults
    PipelineConfig resolve(double dump_temperature) const {
        PipelineConfig c = PipelineConfig::preset(profile.value_or("coco"));
        c.temperature = dump_temperature;
        if (config_file) {
            ojson j = detail::parse_json(detail::read_file(*config_file), *config_file);
            if (!j.is_object()) throw UsageError(*config_file + ": config must be a JSON object");
            if (auto it = j.find("profile"); it != j.end()) {
                const auto p = it->get<std::string>();
                if (profile && *profile != p) {
                    throw UsageError("--profile " + *profile + " conflicts with profile '" + p + "' in " + *config_file);
                }
                const PipelineConfig base = PipelineConfig::preset(p);
                c.k = base.k;
                c.alpha = base.alpha;
                c.gamma = base.gamma;
                j.erase(it);
            }
            if (profile) {
                const PipelineConfig pc = PipelineConfig::preset(*profile);
                for (const char* key : {"k", "alpha", "gamma"}) {
                    if (!j.contains(key)) continue;
                    const double v = j[key].get<double>();
                    const double want = key[0] == 'k' ? static_cast<double>(pc.k) : key[0] == 'a' ? pc.alpha : pc.gamma;
                    if (v != want) {
                        throw UsageError(std::string("config key '") + key + "' in " + *config_file +
                                         " conflicts with --profile " + *profile);
                    }
                }
            }
            apply_config_json(j, c);
        }
        if (mode) c.mode = parse_mode(*mode);
        if (no_arp_lq) c.switches.arp_lq = false;
        if (no_aoc_vs) c.switches.aoc_vs = false;
        if (no_aoc_lq) c.switches.aoc_lq = false;
        if (k) c.k = *k;
        if (alpha) c.alpha = *alpha;
        if (gamma) c.gamma = *gamma;
        if (temperature) c.temperature = *temperature;
        if (proposal_nms) c.proposal_nms_iou = *proposal_nms;
        if (class_nms) c.class_nms_iou = *class_nms;
        if (keep_max) c.proposal_keep_max = *keep_max;
        if (detections_per_image) c.detections_per_image = *detections_per_image;
        if (score_threshold) c.score_threshold = *score_threshold;
        try {
            c.validate();
        } catch (const ContractError& e) {
            throw UsageError(e.what());
        }
        return c;
    }
};

void write_json_output(const std::optional<std::string>& path, const ojson& j) {
    const std::string text = j.dump(1) + "\n";
    if (path) {
        detail::write_file(*path, text);
    } else {
        std::cout << text;
    }
}

SamplingStrategy parse_strategy(const std::string& s, std::uint64_t seed) {
    const auto colon = s.find(':');
    if (colon == std::string::npos) throw UsageError("strategy must be random:N or topk:N, got '" + s + "'");
    const std::string kind = s.substr(0, colon);
    std::size_t n = 0;
    try {
        std::size_t used = 0;
        n = std::stoul(s.substr(colon + 1), &used);
        if (used != s.size() - colon - 1) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
        throw UsageError("strategy count must be a positive integer, got '" + s + "'");
    }
    if (n == 0) throw UsageError("strategy count must be positive");
    if (kind == "random") return SamplingStrategy::random_n(n, seed);
    if (kind == "topk") return SamplingStrategy::top_k(n);
    throw UsageError("unknown strategy '" + kind + "' (expected random or topk)");
}

std::size_t chunk_size(std::size_t workers) { return std::max<std::size_t>(16, 4 * workers); }

/// Reads records in chunks so that memory stays bounded by the chunk size.
template <typename Fn>
void for_each_chunk(DumpReader& reader, std::size_t chunk, Fn&& fn) {
    std::vector<ImageRecord> buf;
    while (true) {
        buf.clear();
        while (buf.size() < chunk) {
            auto r = reader.next();
            if (!r) break;
            buf.push_back(std::move(*r));
        }
        if (buf.empty()) break;
        fn(std::span<const ImageRecord>(buf));
        if (buf.size() < chunk) break;
    }
}

std::vector<GroundTruthRecord> align_ground_truth(const std::vector<GroundTruthRecord>& gt,
                                                  std::span<const ImageRecord> records) {
    std::map<std::string, const GroundTruthRecord*> by_id;
    for (const auto& g : gt) by_id[g.image_id] = &g;
    std::vector<GroundTruthRecord> out;
    out.reserve(records.size());
    for (const auto& r : records) {
        auto it = by_id.find(r.image_id);
        if (it == by_id.end()) {
            out.push_back({r.image_id, {}});
        } else {
            out.push_back(*it->second);
        }
    }
    return out;
}

ClassCatalog normalized_catalog(const ClassCatalog& c) { return ClassCatalog(c.classes(), true); }

// ---------------------------------------------------------------------------

int cmd_calibrate(const std::string& dump, const std::string& strategy_s, std::uint64_t seed,
                  const std::optional<std::string>& gt_path, std::optional<double> temperature, const std::string& out) {
    const SamplingStrategy strategy = parse_strategy(strategy_s, seed);
    DumpReader reader(dump);
    const ClassCatalog catalog = normalized_catalog(reader.header().catalog);
    const double temp = temperature.value_or(reader.header().temperature);
    std::vector<GroundTruthRecord> gt;
    if (gt_path) gt = load_ground_truth(*gt_path).records;

    std::map<int, ClassSamples> merged;
    for_each_chunk(reader, 64, [&](std::span<const ImageRecord> recs) {
        std::vector<GroundTruthRecord> aligned;
        if (gt_path) aligned = align_ground_truth(gt, recs);
        for (auto& s : collect_class_samples(recs, catalog, aligned, temp, true)) {
            auto& dst = merged[s.class_id];
            dst.class_id = s.class_id;
            for (auto& f : s.features) dst.features.push_back(std::move(f));
            dst.scores.insert(dst.scores.end(), s.scores.begin(), s.scores.end());
        }
    });
    std::vector<ClassSamples> samples;
    for (auto& [id, s] : merged) samples.push_back(std::move(s));
    const PrototypeBank bank = build_bank(samples, catalog, strategy);
    save_bank(out, bank, catalog);
    return 0;
}

std::optional<double> resolve_trivial_offset(const std::optional<std::string>& arg, const std::string& dump,
                                             const std::optional<std::string>& gt_path, const ClassCatalog& catalog,
                                             const PrototypeBank* bank,
                                             const PipelineConfig& config, std::size_t sample, std::uint64_t seed) {
    if (!arg) return std::nullopt;
    if (*arg != "auto") {
        try {
            std::size_t used = 0;
            const double v = std::stod(*arg, &used);
            if (used != arg->size() || !std::isfinite(v)) throw std::invalid_argument("bad");
            return v;
        } catch (const std::exception&) {
            throw UsageError("--trivial-offset must be a number or 'auto', got '" + *arg + "'");
        }
    }
    if (bank == nullptr) throw UsageError("--trivial-offset auto needs --bank");
    DumpReader reader(dump);
    std::vector<ImageRecord> recs;
    while (auto r = reader.next()) recs.push_back(std::move(*r));
    std::vector<GroundTruthRecord> gt;
    if (gt_path) gt = align_ground_truth(load_ground_truth(*gt_path).records, recs);
    return estimate_trivial_offset(recs, gt, catalog, *bank, config, sample, seed);
}

int cmd_run(const std::string& dump, const std::optional<std::string>& bank_path, const ConfigOptions& opts,
            const std::optional<std::string>& trivial, const std::optional<std::string>& trivial_gt,
            std::size_t trivial_sample, bool emit_proposals,
            const CommonOptions& common, const std::string& out) {
    DumpReader reader(dump);
    PipelineConfig config = opts.resolve(reader.header().temperature);
    std::optional<PrototypeBank> bank;
    if (bank_path) bank = load_bank(*bank_path);
    if (config.switches.aoc_vs && !bank) throw UsageError("visual-similarity aggregation needs --bank (or --no-aoc-vs)");
    if (trivial && config.switches.aoc_vs) throw UsageError("--trivial-offset requires --no-aoc-vs");
    config.trivial_offset = resolve_trivial_offset(trivial, dump, trivial_gt, reader.header().catalog,
                                                   bank ? &*bank : nullptr,
                                                   config, trivial_sample, 0);
    const Pipeline pipe(reader.header().catalog, bank ? &*bank : nullptr, config);
    const std::size_t workers = resolve_workers(common.workers);
    DetectionsWriter writer(out, config, reader.header().catalog, emit_proposals);
    for_each_chunk(reader, chunk_size(workers), [&](std::span<const ImageRecord> recs) {
        for (const auto& r : pipe.run_batch(recs, workers).images) writer.write(r);
    });
    return 0;
}

int cmd_eval(const std::string& dets_path, const std::string& gt_path, const std::optional<std::string>& out) {
    const LoadedDetections dets = load_detections(dets_path);
    const LoadedGroundTruth gt = load_ground_truth(gt_path);
    const auto& a = dets.labels.classes();
    const auto& b = gt.labels.classes();
    if (a.size() != b.size() ||
        !std::equal(a.begin(), a.end(), b.begin(), [](const ClassEntry& x, const ClassEntry& y) {
            return x.id == y.id && x.split == y.split;
        })) {
        throw FormatError(dets_path + ": class list does not match " + gt_path);
    }
    const EvalReport rep = evaluate(dets.images, gt.records, gt.labels, dets.with_proposals, dets.score_stream);
    write_json_output(out, eval_json(rep, dets.config));
    return 0;
}

int cmd_ablate(const std::string& dump, const std::string& bank_path, const std::string& gt_path,
               const ConfigOptions& opts, const CommonOptions& common, const std::optional<std::string>& out) {
    LoadedDump d = load_dump(dump);
    const PipelineConfig config = opts.resolve(d.header.temperature);
    const PrototypeBank bank = load_bank(bank_path);
    const auto gt = align_ground_truth(load_ground_truth(gt_path).records, d.records);
    const auto rows = ablation_matrix(d.records, gt, d.header.catalog, bank, config, resolve_workers(common.workers));
    write_json_output(out, ablation_json(rows, config));
    return 0;
}

int cmd_synth(const std::optional<std::string>& spec_path, std::optional<std::uint64_t> seed, std::size_t images,
              const std::string& out, const std::optional<std::string>& gt_out) {
    SceneSpec spec;
    if (spec_path) apply_scene_spec_json(detail::parse_json(detail::read_file(*spec_path), *spec_path), spec);
    if (seed) spec.seed = *seed;
    try {
        spec.validate();
    } catch (const ContractError& e) {
        throw UsageError(e.what());
    }
    const SyntheticGenerator gen(spec);
    DumpHeader header;
    header.dim = spec.dim;
    header.normalized = true;
    header.temperature = spec.temperature;
    header.catalog = gen.catalog();
    DumpWriter writer(out, header);
    const std::string gt_path = gt_out.value_or(out + ".gt.jsonl");
    std::vector<GroundTruthRecord> gts;
    for (std::size_t i = 0; i < images; ++i) {
        auto draw = gen.draw(i);
        writer.write(draw.record);
        gts.push_back(std::move(draw.gt));
    }
    writer.finish();
    save_ground_truth(gt_path, gts, gen.catalog());
    return 0;
}

int cmd_bench(const std::optional<std::string>& dump, const std::optional<std::string>& spec_path,
              std::size_t images, const std::optional<std::string>& bank_path, std::size_t reps,
              const ConfigOptions& opts, const std::optional<std::string>& out) {
    if (dump.has_value() == spec_path.has_value()) throw UsageError("bench needs exactly one of --dump or --spec");
    std::optional<DumpReader> reader;
    std::optional<SyntheticGenerator> gen;
    ClassCatalog catalog;
    double temperature = 1.0;
    if (dump) {
        reader.emplace(*dump);
        catalog = reader->header().catalog;
        temperature = reader->header().temperature;
    } else {
        SceneSpec spec;
        apply_scene_spec_json(detail::parse_json(detail::read_file(*spec_path), *spec_path), spec);
        gen.emplace(spec);
        catalog = gen->catalog();
        temperature = spec.temperature;
    }
    const PipelineConfig config = opts.resolve(temperature);
    std::optional<PrototypeBank> bank;
    if (bank_path) {
        bank = load_bank(*bank_path);
    } else if (config.switches.aoc_vs) {
        if (!gen) throw UsageError("bench on a dump with visual-similarity aggregation needs --bank");
        // Calibration images are drawn from a disjoint index range until every
        // base class has at least one labelled sample.
        const ClassCatalog norm = normalized_catalog(catalog);
        std::vector<ImageRecord> calib;
        std::vector<GroundTruthRecord> calib_gt;
        std::set<int> seen;
        for (std::size_t i = 0; seen.size() < norm.base_columns().size() && i < 4096; ++i) {
            auto d = gen->draw(1'000'000 + i);
            for (const auto& g : d.gt.objects) {
                if (g.split == Split::base) seen.insert(g.class_id);
            }
            calib.push_back(std::move(d.record));
            calib_gt.push_back(std::move(d.gt));
        }
        bank = build_bank(collect_class_samples(calib, norm, calib_gt, temperature, true), norm,
                          SamplingStrategy::random_n(300, 0));
    }
    PipelineConfig base_cfg = config;
    base_cfg.switches = AggregationSwitches::none();
    const Pipeline aggregated(catalog, bank ? &*bank : nullptr, config);
    const Pipeline baseline(catalog, nullptr, base_cfg);
    std::size_t produced = 0;
    auto next = [&]() -> std::optional<ImageRecord> {
        if (reader) return reader->next();
        if (produced >= images) return std::nullopt;
        return gen->draw(produced++).record;
    };
    const LatencySummary s = latency_bench(next, aggregated, baseline, reps);
    ojson j = latency_json(s);
    j["config"] = config_json(config);
    write_json_output(out, j);
    return 0;
}

int cmd_report(const std::vector<std::string>& evals, const std::optional<std::string>& out) {
    if (evals.size() != 2) throw UsageError("report needs exactly two --eval files (baseline first)");
    write_json_output(out, eval_diff_json(load_eval_json(evals[0]), load_eval_json(evals[1])));
    return 0;
}

std::string one_line(std::string s) {
    std::replace(s.begin(), s.end(), '\n', ' ');
    return s;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Training-free aggregation post-processing for open-vocabulary detectors"};
    app.require_subcommand(1);
    CommonOptions common;

    auto* cal = app.add_subcommand("calibrate", "Build a prototype bank from a dump");
    std::string cal_dump, cal_strategy = "random:300", cal_out;
    std::uint64_t cal_seed = 0;
    std::optional<std::string> cal_gt;
    std::optional<double> cal_temp;
    cal->add_option("--dump", cal_dump, "Input dump")->required()->check(CLI::ExistingFile);
    cal->add_option("--strategy", cal_strategy, "random:N or topk:N");
    cal->add_option("--seed", cal_seed, "Seed for random sampling");
    cal->add_option("--gt", cal_gt, "Ground truth used to label samples")->check(CLI::ExistingFile);
    cal->add_option("--temperature", cal_temp, "Sigmoid temperature (default: from the dump)");
    cal->add_option("--out", cal_out, "Output bank")->required();

    auto* run = app.add_subcommand("run", "Run the post-processing pipeline over a dump");
    std::string run_dump, run_out;
    std::optional<std::string> run_bank, run_trivial, run_trivial_gt;
    std::size_t run_trivial_sample = 1000;
    bool run_emit = false;
    ConfigOptions run_opts;
    run->add_option("--dump", run_dump, "Input dump")->required()->check(CLI::ExistingFile);
    run->add_option("--bank", run_bank, "Prototype bank")->check(CLI::ExistingFile);
    run_opts.add_to(*run);
    run->add_option("--trivial-offset", run_trivial, "Constant novel similarity offset, or 'auto'");
    run->add_option("--trivial-sample", run_trivial_sample, "Samples used by --trivial-offset auto");
    run->add_option("--trivial-gt", run_trivial_gt, "Ground truth labelling the --trivial-offset auto samples")
        ->check(CLI::ExistingFile);
    run->add_flag("--emit-proposals", run_emit, "Also write stage-one proposals for recall evaluation");
    run->add_option("--workers", common.workers, "Worker threads");
    run->add_option("--out", run_out, "Output detections")->required();

    auto* ev = app.add_subcommand("eval", "Evaluate detections against ground truth");
    std::string ev_dets, ev_gt;
    std::optional<std::string> ev_out;
    ev->add_option("--dets", ev_dets, "Detections file")->required()->check(CLI::ExistingFile);
    ev->add_option("--gt", ev_gt, "Ground truth file")->required()->check(CLI::ExistingFile);
    ev->add_option("--out", ev_out, "Output report (default: stdout)");

    auto* ab = app.add_subcommand("ablate", "Evaluate all eight switch combinations");
    std::string ab_dump, ab_bank, ab_gt;
    std::optional<std::string> ab_out;
    ConfigOptions ab_opts;
    ab->add_option("--dump", ab_dump, "Input dump")->required()->check(CLI::ExistingFile);
    ab->add_option("--bank", ab_bank, "Prototype bank")->required()->check(CLI::ExistingFile);
    ab->add_option("--gt", ab_gt, "Ground truth file")->required()->check(CLI::ExistingFile);
    ab_opts.add_to(*ab);
    ab->add_option("--workers", common.workers, "Worker threads");
    ab->add_option("--out", ab_out, "Output table (default: stdout)");

    auto* sy = app.add_subcommand("synth", "Generate a synthetic dump and ground truth");
    std::optional<std::string> sy_spec, sy_gt;
    std::optional<std::uint64_t> sy_seed;
    std::size_t sy_images = 200;
    std::string sy_out;
    sy->add_option("--spec", sy_spec, "Scene spec JSON")->check(CLI::ExistingFile);
    sy->add_option("--seed", sy_seed, "Seed (overrides the spec)");
    sy->add_option("--images", sy_images, "Number of images");
    sy->add_option("--out", sy_out, "Output dump")->required();
    sy->add_option("--gt", sy_gt, "Output ground truth (default: <out>.gt.jsonl)");

    auto* be = app.add_subcommand("bench", "Measure the latency added by aggregation");
    std::optional<std::string> be_dump, be_spec, be_bank, be_out;
    std::size_t be_reps = 5, be_images = 100;
    ConfigOptions be_opts;
    be->add_option("--dump", be_dump, "Input dump")->check(CLI::ExistingFile);
    be->add_option("--spec", be_spec, "Stream images from a scene spec instead of a dump")->check(CLI::ExistingFile);
    be->add_option("--images", be_images, "Images to draw with --spec");
    be->add_option("--bank", be_bank, "Prototype bank")->check(CLI::ExistingFile);
    be->add_option("--reps", be_reps, "Timed repetitions per image (>= 3)");
    be_opts.add_to(*be);
    be->add_option("--out", be_out, "Output summary (default: stdout)");

    auto* rp = app.add_subcommand("report", "Paired comparison of two eval reports");
    std::vector<std::string> rp_evals;
    std::optional<std::string> rp_out;
    rp->add_option("--eval", rp_evals, "Eval report, baseline first")->required()->check(CLI::ExistingFile);
    rp->add_option("--out", rp_out, "Output diff (default: stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: usage: " << one_line(e.what()) << "\n";
        return 2;
    }

    try {
        if (*cal) return cmd_calibrate(cal_dump, cal_strategy, cal_seed, cal_gt, cal_temp, cal_out);
        if (*run) return cmd_run(run_dump, run_bank, run_opts, run_trivial, run_trivial_gt, run_trivial_sample, run_emit, common,
                                   run_out);
        if (*ev) return cmd_eval(ev_dets, ev_gt, ev_out);
        if (*ab) return cmd_ablate(ab_dump, ab_bank, ab_gt, ab_opts, common, ab_out);
        if (*sy) return cmd_synth(sy_spec, sy_seed, sy_images, sy_out, sy_gt);
        if (*be) return cmd_bench(be_dump, be_spec, be_images, be_bank, be_reps, be_opts, be_out);
        if (*rp) return cmd_report(rp_evals, rp_out);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.kind() << ": " << one_line(e.what()) << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.kind() << ": " << one_line(e.what()) << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: internal: " << one_line(e.what()) << "\n";
        return 1;
    }
    return 0;
}
