// latentmap: scene generation, training, mapping, extraction and evaluation.
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "latentmap/cli/config.hpp"

using namespace latentmap;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using clock_type = std::chrono::steady_clock;
double since(clock_type::time_point t0) { return std::chrono::duration<double>(clock_type::now() - t0).count(); }

// stderr, mirrored into <out>/run.log once an output directory exists.
struct Log {
  std::ofstream file;
  void open(const fs::path& dir) {
    fs::create_directories(dir);
    file.open(dir / "run.log", std::ios::app);
  }
  void operator()(const std::string& msg) {
    std::cerr << msg << "\n";
    if (file) file << msg << "\n" << std::flush;
  }
};
Log logline;

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
};

void add_common(CLI::App* sub, Common& c, bool needs_out = true) {
  sub->add_option("-c,--config", c.config, "JSON config file (defaults when omitted)")->check(CLI::ExistingFile);
  sub->add_option("--set", c.sets, "Override, section.key=value (repeatable)");
  auto* o = sub->add_option("-o,--out", c.out, "Output directory");
  if (needs_out) o->required();
}

std::string config_hash(const RunConfig& cfg) { return stable_hash(to_json(cfg).dump()); }

void write_json(const fs::path& path, const json& j) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << j.dump(2) << "\n";
}

// Config and run record first, so a failing run still leaves them behind.
void start_run(const std::string& command, const Common& c, const RunConfig& cfg, const json& inputs) {
  const fs::path out(c.out);
  logline.open(out);
  write_resolved_config(out, cfg);
  write_json(out / "run.json", {{"command", command},
                                {"seed", cfg.seed},
                                {"config_hash", config_hash(cfg)},
                                {"overrides", c.sets},
                                {"inputs", inputs}});
  logline(command + ": output " + out.string() + ", config hash " + config_hash(cfg));
}

Networks<float> load_networks(const std::string& path, const RunConfig& cfg) {
  std::vector<std::string> loaded;
  auto nets = Networks<float>::load(path, cfg.network, &loaded);
  std::string names;
  for (const auto& l : loaded) names += " " + l;
  logline("loaded " + path + ":" + names);
  return nets;
}

std::string frame_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%04d.ply", i);
  return buf;
}

// ---- commands -------------------------------------------------------------

void cmd_gen_scenes(const Common& c, const RunConfig& cfg) {
  start_run("gen-scenes", c, cfg, json::object());
  const fs::path out(c.out);
  const auto in = make_compare_inputs(cfg.compare);
  write_scene(out / "scene.json", in.scene);
  write_ply(out / "ground_truth.ply", in.ground_truth);
  std::vector<Pose> truth;
  for (const auto& f : in.frames) truth.push_back(f.pose);
  const auto noisy = with_pose_noise(in.frames, cfg.noise);
  std::vector<Pose> perturbed;
  for (const auto& f : noisy) perturbed.push_back(f.pose);
  write_trajectory(out / "poses_true.txt", truth);
  write_trajectory(out / "poses.txt", perturbed);
  fs::create_directories(out / "frames");
  for (const auto& f : in.frames) write_ply(out / "frames" / frame_name(f.index), f.points);
  write_json(out / "summary.json", {{"scene", in.scene.name},
                                    {"frames", in.frames.size()},
                                    {"floor_z", in.scene.floor_z},
                                    {"ground_truth_triangles", in.ground_truth.triangles.size()}});
  logline("wrote " + std::to_string(in.frames.size()) + " frames");
}

void cmd_train_shapes(const Common& c, const RunConfig& cfg, const std::string& init) {
  start_run("train-shapes", c, cfg, {{"init", init}});
  const fs::path out(c.out);
  auto t0 = clock_type::now();
  const auto train = make_shape_dataset(cfg.stage1.data, cfg.seed);
  auto held_opt = cfg.stage1.data;
  held_opt.shapes = cfg.stage1.held_out_shapes;
  // Shape seeds of seed + 1 never collide with those of seed.
  const auto held = held_opt.shapes > 0 ? make_shape_dataset(held_opt, cfg.seed + 1) : std::vector<ShapeSample>{};
  logline("data: " + std::to_string(train.size()) + " train / " + std::to_string(held.size()) + " held-out views in " +
          std::to_string(since(t0)) + " s");

  auto nets = init.empty() ? Networks<float>(cfg.network, cfg.seed) : load_networks(init, cfg);
  auto opt = cfg.stage1.train;
  opt.config_hash = config_hash(cfg);
  TrainReport report;
  try {
    report = train_stage1(nets, train, opt);
  } catch (const TrainingDiverged& e) {
    e.report.write_csv(out / "stage1.csv");
    throw;
  }
  report.write_csv(out / "stage1.csv");
  nets.save(out / "weights.ckpt");
  json summary = {{"steps", opt.steps}, {"seconds", report.seconds}};
  const auto tr = evaluate_stage1(nets, train);
  summary["train_accuracy"] = tr.accuracy;
  if (!held.empty()) {
    const auto h = evaluate_stage1(nets, held);
    summary["held_out_accuracy"] = h.accuracy;
    summary["held_out_near_accuracy"] = h.near_accuracy;
    summary["held_out_bce"] = h.bce;
    logline("held-out accuracy " + std::to_string(h.accuracy) + " (near-surface " + std::to_string(h.near_accuracy) +
            ")");
  }
  write_json(out / "summary.json", summary);
}

std::vector<FusionExample<float>> fusion_pool(const RunConfig& cfg, const Networks<float>& nets, int first, int n) {
  std::vector<FusionExample<float>> pool;
  for (int i = first; i < first + n; ++i) {
    const std::uint64_t s = cfg.seed * 7919 + static_cast<std::uint64_t>(i);
    const auto seq = make_fusion_sequence(s, cfg.stage2.data);
    auto ex = fusion_examples(seq, nets, cfg.stage2.data, s);
    for (auto& e : ex) pool.push_back(std::move(e));
  }
  return pool;
}

void cmd_train_fusion(const Common& c, const RunConfig& cfg, const std::string& weights) {
  start_run("train-fusion", c, cfg, {{"weights", weights}});
  const fs::path out(c.out);
  auto nets = load_networks(weights, cfg);
  auto t0 = clock_type::now();
  const auto train = fusion_pool(cfg, nets, 0, cfg.stage2.sequences);
  const auto held = fusion_pool(cfg, nets, cfg.stage2.sequences, cfg.stage2.held_out_sequences);
  logline("examples: " + std::to_string(train.size()) + " train / " + std::to_string(held.size()) + " held-out in " +
          std::to_string(since(t0)) + " s");
  if (train.empty()) throw std::runtime_error("train-fusion: no training examples (scans never passed the gate?)");
  auto opt = cfg.stage2.train;
  opt.config_hash = config_hash(cfg);
  TrainReport report;
  try {
    report = train_stage2(nets, train, opt);
  } catch (const TrainingDiverged& e) {
    e.report.write_csv(out / "stage2.csv");
    throw;
  }
  report.write_csv(out / "stage2.csv");
  nets.save(out / "weights.ckpt");
  json summary = {{"steps", opt.steps}, {"seconds", report.seconds}, {"train_examples", train.size()}};
  if (!held.empty()) {
    const auto e = evaluate_fusion(nets, held);
    summary["held_out_fea"] = e.fea;
    summary["held_out_fea_identity"] = e.fea_identity;
    summary["held_out_rec"] = e.rec;
    summary["held_out_rec_identity"] = e.rec_identity;
    summary["held_out_voxels"] = e.voxels;
    logline("held-out L_fea " + std::to_string(e.fea) + " vs identity " + std::to_string(e.fea_identity));
  }
  write_json(out / "summary.json", summary);
}

std::vector<ScanFrame> read_frames(const fs::path& dir, const RunConfig& cfg, bool true_poses) {
  const auto poses = read_trajectory(dir / (true_poses ? "poses_true.txt" : "poses.txt"));
  std::vector<ScanFrame> frames;
  for (int i = 0; i < static_cast<int>(poses.size()); ++i) {
    ScanFrame f;
    f.index = i;
    f.timestamp = i;
    f.pose = poses[i];
    f.points = read_ply_points(dir / "frames" / frame_name(i));
    f.sensor = cfg.sensor;
    frames.push_back(std::move(f));
  }
  return frames;
}

void cmd_map(const Common& c, const RunConfig& cfg, const std::string& scenes, const std::string& weights,
             bool true_poses) {
  start_run("map", c, cfg, {{"scenes", scenes}, {"weights", weights}, {"true_poses", true_poses}});
  const fs::path out(c.out);
  const auto nets = load_networks(weights, cfg);
  const auto frames = read_frames(scenes, cfg, true_poses);
  NeuralMap map(cfg.grid, nets.config.latent_shape());
  std::ofstream timing(out / "timing.csv");
  timing << "frame,input_points,used_points,updated_voxels,skipped_voxels,encode_seconds,total_seconds\n";
  double total = 0;
  for (const auto& f : frames) {
    const auto r = integrate(map, f, nets.encoder, cfg.policy);
    total += r.total_seconds;
    timing << r.frame_index << "," << r.input_points << "," << r.used_points << "," << r.updated.size() << ","
           << r.skipped.size() << "," << format_number(r.encode_seconds) << "," << format_number(r.total_seconds)
           << "\n";
  }
  save_snapshot(out / "map.lmmap", map);

  // Decode throughput: full lattice over the map, per observed voxel.
  json summary = {{"frames", frames.size()},
                  {"integrate_seconds", total},
                  {"frames_per_second", total > 0 ? frames.size() / total : 0.0},
                  {"allocated_voxels", map.cells.size()},
                  {"observed_voxels", map.observed_count()}};
  if (map.observed_count() > 0) {
    MapDecoder dec(map, nets.decoder, nets.fusion, cfg.extraction);
    Vec3 lo, hi;
    map_bounds(map, lo, hi);
    const auto t0 = clock_type::now();
    const auto grid = extract_grid(dec, lo, hi);
    const double s = since(t0);
    summary["decode_seconds"] = s;
    summary["decode_nodes"] = grid.size();
    summary["decode_voxels_per_second"] = s > 0 ? map.observed_count() / s : 0.0;
    summary["decode_nodes_per_second"] = s > 0 ? grid.size() / s : 0.0;
  }
  write_json(out / "summary.json", summary);
  std::ostringstream msg;
  msg << "integrated " << frames.size() << " frames, " << map.observed_count() << " observed voxels";
  if (total > 0) msg << ", " << frames.size() / total << " frames/s";
  logline(msg.str());
}

void cmd_extract(const Common& c, const RunConfig& cfg, const std::string& map_path, const std::string& weights) {
  start_run("extract", c, cfg, {{"map", map_path}, {"weights", weights}});
  const fs::path out(c.out);
  const auto nets = load_networks(weights, cfg);
  const auto map = load_snapshot(map_path);
  MapDecoder dec(map, nets.decoder, nets.fusion, cfg.extraction);
  const auto t0 = clock_type::now();
  OccupancyGrid grid;
  if (!map.cells.empty()) {
    Vec3 lo, hi;
    map_bounds(map, lo, hi);
    grid = extract_grid(dec, lo, hi);
  }
  const auto mesh = marching_cubes(grid, cfg.extraction.tau_occ);
  write_grid(out / "grid.lmgrid", grid);
  write_ply(out / "mesh.ply", mesh);
  write_json(out / "summary.json", {{"nodes", grid.size()},
                                    {"unknown", grid.count(NodeState::Unknown)},
                                    {"free", grid.count(NodeState::Free)},
                                    {"occupied", grid.count(NodeState::Occupied)},
                                    {"triangles", mesh.triangles.size()},
                                    {"seconds", since(t0)}});
  logline("extracted " + std::to_string(mesh.triangles.size()) + " triangles");
}

void write_metrics_csv(const fs::path& path, const std::vector<std::pair<std::string, MetricsReport>>& rows,
                       const std::string& key) {
  std::ofstream os(path);
  os << key << ",accuracy,completeness,recall,recall_no_floor,pred_samples,gt_samples\n";
  for (const auto& [k, m] : rows)
    os << k << "," << format_number(m.accuracy) << "," << format_number(m.completeness) << ","
       << format_number(m.recall) << "," << format_number(m.recall_no_floor) << "," << m.pred_samples << ","
       << m.gt_samples << "\n";
}

void cmd_eval(const Common& c, const RunConfig& cfg, const std::string& mesh_path, const std::string& gt_path,
              double floor_z) {
  start_run("eval", c, cfg, {{"mesh", mesh_path}, {"ground_truth", gt_path}, {"floor_z", floor_z}});
  auto mc = cfg.metrics;
  mc.floor_z = floor_z;
  const auto m = compute_metrics(read_ply_mesh(mesh_path), read_ply_mesh(gt_path), mc);
  write_metrics_csv(fs::path(c.out) / "metrics.csv", {{fs::path(mesh_path).filename().string(), m}}, "mesh");
  logline("recall " + format_number(m.recall) + ", accuracy " + format_number(m.accuracy));
}

void cmd_compare(const Common& c, const RunConfig& cfg, const std::string& weights, bool save_meshes) {
  start_run("compare", c, cfg, {{"weights", weights}});
  const fs::path out(c.out);
  const auto nets = load_networks(weights, cfg);
  MeshSink sink;
  if (save_meshes) {
    fs::create_directories(out / "meshes");
    sink = [&](const CompareRow& r, const TriangleMesh& m) {
      write_ply(out / "meshes" / (r.method + "_sigma" + format_number(r.sigma) + ".ply"), m);
    };
  }
  const auto rows = run_compare(cfg.compare, nets, sink);
  write_compare_csv(out / "compare.csv", rows);
  write_compare_timing_csv(out / "compare_timing.csv", rows);
  for (const auto& r : rows)
    logline(r.method + " sigma " + format_number(r.sigma) + " recall " + format_number(r.metrics.recall));
}

void cmd_calibrate(const Common& c, const RunConfig& cfg, const std::string& map_path, const std::string& weights,
                   const std::string& gt_path, double floor_z) {
  start_run("calibrate-tau", c, cfg, {{"map", map_path}, {"weights", weights}, {"ground_truth", gt_path}});
  const auto nets = load_networks(weights, cfg);
  const auto map = load_snapshot(map_path);
  MapDecoder dec(map, nets.decoder, nets.fusion, cfg.extraction);
  auto mc = cfg.metrics;
  mc.floor_z = floor_z;
  const auto cal = calibrate_tau(dec, read_ply_mesh(gt_path), cfg.calibrate_taus, mc);
  std::vector<std::pair<std::string, MetricsReport>> rows;
  for (const auto& r : cal.sweep) rows.emplace_back(format_number(r.tau), r.metrics);
  write_metrics_csv(fs::path(c.out) / "tau_sweep.csv", rows, "tau");
  write_json(fs::path(c.out) / "best_tau.json", {{"tau_occ", cal.best_tau}});
  logline("best tau_occ " + format_number(cal.best_tau));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Incremental neural implicit mapping toolkit"};
  app.require_subcommand(1);
  Common common;
  std::string weights, init, scenes, map_path, mesh_path, gt_path;
  bool true_poses = false, save_meshes = true;
  double floor_z = 0.0;

  auto* gen = app.add_subcommand("gen-scenes", "Simulate a scene, trajectory, scans and ground truth");
  add_common(gen, common);
  auto* ts = app.add_subcommand("train-shapes", "Stage 1: encoder and decoder on procedural shapes");
  add_common(ts, common);
  ts->add_option("--init", init, "Start from these weights")->check(CLI::ExistingFile);
  auto* tf = app.add_subcommand("train-fusion", "Stage 2: fusion network with frozen encoder and decoder");
  add_common(tf, common);
  tf->add_option("-w,--weights", weights, "Stage-1 checkpoint")->required()->check(CLI::ExistingFile);
  auto* mp = app.add_subcommand("map", "Integrate the frames of a gen-scenes directory");
  add_common(mp, common);
  mp->add_option("-s,--scenes", scenes, "gen-scenes output directory")->required()->check(CLI::ExistingDirectory);
  mp->add_option("-w,--weights", weights, "Checkpoint")->required()->check(CLI::ExistingFile);
  mp->add_flag("--true-poses", true_poses, "Use the noise-free poses");
  auto* ex = app.add_subcommand("extract", "Map snapshot to occupancy grid and mesh");
  add_common(ex, common);
  ex->add_option("-m,--map", map_path, "Map snapshot")->required()->check(CLI::ExistingFile);
  ex->add_option("-w,--weights", weights, "Checkpoint")->required()->check(CLI::ExistingFile);
  auto* ev = app.add_subcommand("eval", "Metrics of a mesh against ground truth");
  add_common(ev, common);
  ev->add_option("--mesh", mesh_path, "Predicted mesh (PLY)")->required()->check(CLI::ExistingFile);
  ev->add_option("--gt", gt_path, "Ground-truth mesh (PLY)")->required()->check(CLI::ExistingFile);
  ev->add_option("--floor-z", floor_z, "Floor height for the no-floor recall");
  auto* cmp = app.add_subcommand("compare", "Ours, TSDF and static fusion over the noise levels");
  add_common(cmp, common);
  cmp->add_option("-w,--weights", weights, "Checkpoint")->required()->check(CLI::ExistingFile);
  cmp->add_flag("!--no-meshes", save_meshes, "Skip writing meshes");
  auto* cal = app.add_subcommand("calibrate-tau", "Sweep the occupancy threshold on a map");
  add_common(cal, common);
  cal->add_option("-m,--map", map_path, "Map snapshot")->required()->check(CLI::ExistingFile);
  cal->add_option("-w,--weights", weights, "Checkpoint")->required()->check(CLI::ExistingFile);
  cal->add_option("--gt", gt_path, "Ground-truth mesh (PLY)")->required()->check(CLI::ExistingFile);
  cal->add_option("--floor-z", floor_z, "Floor height for the no-floor recall");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  RunConfig cfg;
  try {
    cfg = load_config(common.config, common.sets);
  } catch (const ConfigError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  }

  try {
    if (*gen) cmd_gen_scenes(common, cfg);
    else if (*ts) cmd_train_shapes(common, cfg, init);
    else if (*tf) cmd_train_fusion(common, cfg, weights);
    else if (*mp) cmd_map(common, cfg, scenes, weights, true_poses);
    else if (*ex) cmd_extract(common, cfg, map_path, weights);
    else if (*ev) cmd_eval(common, cfg, mesh_path, gt_path, floor_z);
    else if (*cmp) cmd_compare(common, cfg, weights, save_meshes);
    else if (*cal) cmd_calibrate(common, cfg, map_path, weights, gt_path, floor_z);
  } catch (const std::exception& e) {
    logline(std::string("error: ") + e.what());
    return 1;
  }
  return 0;
}
