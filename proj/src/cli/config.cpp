#include "latentmap/cli/config.hpp"

#include <fstream>
#include <set>

namespace latentmap {

using nlohmann::json;

namespace {

const json& empty_object() {
  static const json e = json::object();
  return e;
}

// Strict view of one JSON object: reads known keys, then rejects the rest.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + "expected an object");
  }

  Section sub(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return Section(it == j_.end() ? empty_object() : *it, join(key));
  }

  void get(const std::string& key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) fail(key, "expected a number");
      out = v->get<double>();
    }
  }
  void get(const std::string& key, int& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer()) fail(key, "expected an integer");
      const auto x = v->get<std::int64_t>();
      if (x < INT32_MIN || x > INT32_MAX) fail(key, "integer out of range");
      out = static_cast<int>(x);
    }
  }
  void get(const std::string& key, std::uint64_t& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer() || (v->is_number_integer() && !v->is_number_unsigned() && v->get<std::int64_t>() < 0))
        fail(key, "expected a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void get(const std::string& key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) fail(key, "expected true or false");
      out = v->get<bool>();
    }
  }
  void get(const std::string& key, float& out) {
    double d = out;
    get(key, d);
    out = static_cast<float>(d);
  }
  void get(const std::string& key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) fail(key, "expected a string");
      out = v->get<std::string>();
    }
  }
  template <typename T>
  void get(const std::string& key, std::vector<T>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) fail(key, "expected an array");
      std::vector<T> tmp;
      for (const auto& e : *v) {
        if constexpr (std::is_same_v<T, std::string>) {
          if (!e.is_string()) fail(key, "expected an array of strings");
        } else if constexpr (std::is_integral_v<T>) {
          if (!e.is_number_integer()) fail(key, "expected an array of integers");
        } else {
          if (!e.is_number()) fail(key, "expected an array of numbers");
        }
        tmp.push_back(e.get<T>());
      }
      out = std::move(tmp);
    }
  }
  /// String field mapped through `parse`; parse errors become field errors.
  template <typename E, typename F>
  void get_enum(const std::string& key, E& out, F parse) {
    std::string s;
    if (!find(key)) return;
    get(key, s);
    try {
      out = parse(s);
    } catch (const std::exception& e) {
      fail(key, e.what());
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("config: unknown key '" + join(it.key()) + "'");
  }

 private:
  std::string join(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  std::string where() const { return "config: " + (path_.empty() ? std::string("<root>") : path_) + ": "; }
  const json* find(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
    throw ConfigError("config: " + join(key) + ": " + msg);
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

PoolMode pool_from_string(const std::string& s) {
  if (s == "mean") return PoolMode::Mean;
  if (s == "max") return PoolMode::Max;
  throw std::invalid_argument("unknown pool mode '" + s + "' (mean|max)");
}

std::string pool_to_string(PoolMode m) { return m == PoolMode::Mean ? "mean" : "max"; }

std::string style_to_string(TrajectoryStyle s) { return s == TrajectoryStyle::Orbit ? "orbit" : "lawnmower"; }

template <typename F>
void checked(const std::string& what, F f) {
  try {
    f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("config: " + what + ": " + e.what());
  }
}

}  // namespace

void RunConfig::propagate() {
  network.grid_res = grid.encoder_grid_res;
  network.latent_res = grid.latent_res;
  network.latent_channels = grid.latent_channels;
  network.depth = grid.depth;

  stage1.data.spec = grid;
  stage2.data.spec = grid;
  stage2.data.sensor = sensor;
  stage2.data.policy = policy;

  compare.scene = scene.kind;
  compare.scene_seed = scene.seed;
  compare.scans = scene.frames;
  compare.trajectory = scene.trajectory;
  compare.trajectory_seed = scene.trajectory_seed;
  compare.sensor = sensor;
  compare.spec = grid;
  compare.policy = policy;
  compare.extraction = extraction;
  compare.tsdf = tsdf;
  compare.metrics = metrics;
}

void RunConfig::validate() const {
  if (scene.kind != "apartment" && scene.kind != "room") throw ConfigError("config: scene.kind: must be apartment or room");
  if (scene.frames < 0) throw ConfigError("config: scene.frames: must be >= 0");
  checked("grid", [&] { grid.validate(); });
  checked("network", [&] { network.validate(); });
  checked("sensor", [&] { sensor.validate(); });
  checked("noise", [&] { noise.validate(); });
  checked("policy", [&] { policy.validate(); });
  checked("extraction", [&] { extraction.validate(grid); });
  checked("tsdf", [&] { tsdf.validate(); });
  checked("metrics", [&] { metrics.validate(); });
  checked("compare", [&] { compare.validate(); });
  const auto& s1 = stage1;
  if (s1.data.shapes < 1) throw ConfigError("config: stage1.shapes: must be >= 1");
  if (s1.data.views_per_shape < 1) throw ConfigError("config: stage1.views_per_shape: must be >= 1");
  if (s1.data.queries < 1) throw ConfigError("config: stage1.queries: must be >= 1");
  if (s1.data.min_points < 1 || s1.data.max_points < s1.data.min_points)
    throw ConfigError("config: stage1.min_points/max_points: need 1 <= min_points <= max_points");
  if (!(s1.data.near_surface_fraction >= 0 && s1.data.near_surface_fraction <= 1))
    throw ConfigError("config: stage1.near_surface_fraction: must be in [0, 1]");
  if (!(s1.data.partial_view_fraction >= 0 && s1.data.partial_view_fraction <= 1))
    throw ConfigError("config: stage1.partial_view_fraction: must be in [0, 1]");
  if (s1.held_out_shapes < 0) throw ConfigError("config: stage1.held_out_shapes: must be >= 0");
  for (const auto& k : s1.data.kinds)
    if (k != "box" && k != "sphere" && k != "cylinder" && k != "wall" && k != "corner" && k != "thin" && k != "compound")
      throw ConfigError("config: stage1.kinds: unknown kind '" + k + "'");
  if (s1.train.steps < 0 || s1.train.warmup_steps < 0 || s1.train.batch < 1 || !(s1.train.adam.lr > 0) || s1.train.log_every < 1)
    throw ConfigError("config: stage1: need steps >= 0, warmup_steps >= 0, batch >= 1, lr > 0, log_every >= 1");
  const auto& s2 = stage2;
  if (s2.sequences < 1 || s2.held_out_sequences < 0) throw ConfigError("config: stage2.sequences: must be >= 1");
  if (s2.data.scans < 1 || s2.data.queries_per_voxel < 1 || s2.data.orbit_frames < s2.data.scans)
    throw ConfigError("config: stage2: need scans >= 1, queries_per_voxel >= 1, orbit_frames >= scans");
  if (s2.train.steps < 0 || s2.train.batch < 1 || !(s2.train.adam.lr > 0) || s2.train.log_every < 1)
    throw ConfigError("config: stage2: need steps >= 0, batch >= 1, lr > 0, log_every >= 1");
  if (calibrate_taus.empty()) throw ConfigError("config: calibrate.taus: must not be empty");
  for (double t : calibrate_taus)
    if (!(t > 0 && t < 1)) throw ConfigError("config: calibrate.taus: values must lie in (0, 1)");
}

json to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["grid"] = {{"d_V", c.grid.d_V},
               {"d_I", c.grid.d_I},
               {"d_q", c.grid.d_q},
               {"encoder_grid_res", c.grid.encoder_grid_res},
               {"latent_res", c.grid.latent_res},
               {"latent_channels", c.grid.latent_channels},
               {"query_density", c.grid.query_density},
               {"depth", c.grid.depth}};
  j["network"] = {{"point_hidden", c.network.point_hidden},
                  {"encoder_channels", c.network.encoder_channels},
                  {"decoder_channels", c.network.decoder_channels},
                  {"decoder_hidden", c.network.decoder_hidden},
                  {"pool", pool_to_string(c.network.pool)},
                  {"fusion_hidden", c.network.fusion_hidden},
                  {"fusion_identity_skip", c.network.fusion_identity_skip},
                  {"fusion_init_std", c.network.fusion_init_std}};
  j["sensor"] = {{"type", to_string(c.sensor.type)}, {"width", c.sensor.width},   {"height", c.sensor.height},
                 {"hfov", c.sensor.hfov},            {"vfov", c.sensor.vfov},     {"max_range", c.sensor.max_range}};
  const auto& t = c.scene.trajectory;
  j["scene"] = {{"kind", c.scene.kind},
                {"seed", c.scene.seed},
                {"frames", c.scene.frames},
                {"trajectory_seed", c.scene.trajectory_seed},
                {"trajectory",
                 {{"style", style_to_string(t.style)},
                  {"height", t.height},
                  {"pitch", t.pitch},
                  {"radius_fraction", t.radius_fraction},
                  {"clearance", t.clearance},
                  {"alt_step", t.alt_step}}}};
  j["noise"] = {{"sigma_T", c.noise.sigma_T}, {"sigma_Tz", c.noise.sigma_Tz}, {"sigma_yaw", c.noise.sigma_yaw}, {"seed", c.noise.seed}};
  j["policy"] = {{"min_update_fraction", c.policy.min_update_fraction},
                 {"input_subsample_fraction", c.policy.input_subsample_fraction},
                 {"seed", c.policy.seed},
                 {"allocate_frustum", c.policy.allocate_frustum}};
  j["extraction"] = {{"tau_occ", c.extraction.tau_occ},
                     {"query_density", c.extraction.query_density},
                     {"interpolate_boundaries", c.extraction.interpolate_boundaries},
                     {"blend", to_string(c.extraction.blend)},
                     {"use_fusion", c.extraction.use_fusion}};
  j["tsdf"] = {{"voxel_size", c.tsdf.voxel_size}, {"truncation", c.tsdf.truncation}};
  j["metrics"] = {{"n_samples", c.metrics.n_samples},
                  {"tau_r", c.metrics.tau_r},
                  {"exclude_floor", c.metrics.exclude_floor},
                  {"floor_margin", c.metrics.floor_margin},
                  {"seed", c.metrics.seed}};
  const auto& d1 = c.stage1.data;
  const auto& t1 = c.stage1.train;
  j["stage1"] = {{"shapes", d1.shapes},
                 {"views_per_shape", d1.views_per_shape},
                 {"queries", d1.queries},
                 {"near_surface_fraction", d1.near_surface_fraction},
                 {"near_surface_sigma", d1.near_surface_sigma},
                 {"min_points", d1.min_points},
                 {"max_points", d1.max_points},
                 {"partial_view_fraction", d1.partial_view_fraction},
                 {"kinds", d1.kinds},
                 {"held_out_shapes", c.stage1.held_out_shapes},
                 {"steps", t1.steps},
                 {"batch", t1.batch},
                 {"lr", t1.adam.lr},
                 {"final_lr_fraction", t1.final_lr_fraction},
                 {"warmup_steps", t1.warmup_steps},
                 {"log_every", t1.log_every},
                 {"augment", t1.augment},
                 {"seed", t1.seed}};
  const auto& d2 = c.stage2.data;
  const auto& t2 = c.stage2.train;
  j["stage2"] = {{"sequences", c.stage2.sequences},
                 {"held_out_sequences", c.stage2.held_out_sequences},
                 {"scans", d2.scans},
                 {"queries_per_voxel", d2.queries_per_voxel},
                 {"alt_step", d2.alt_step},
                 {"orbit_frames", d2.orbit_frames},
                 {"steps", t2.steps},
                 {"batch", t2.batch},
                 {"lr", t2.adam.lr},
                 {"final_lr_fraction", t2.final_lr_fraction},
                 {"log_every", t2.log_every},
                 {"seed", t2.seed}};
  j["compare"] = {{"sigmas", c.compare.sigmas},
                  {"sigma_Tz_ratio", c.compare.sigma_Tz_ratio},
                  {"noise_seed", c.compare.noise_seed},
                  {"methods", c.compare.methods},
                  {"gt_trim_radius", c.compare.gt_trim_radius}};
  j["calibrate"] = {{"taus", c.calibrate_taus}};
  return j;
}

RunConfig config_from_json(const json& j) {
  RunConfig c;
  Section root(j, "");
  root.get("seed", c.seed);
  {
    Section s = root.sub("grid");
    s.get("d_V", c.grid.d_V);
    s.get("d_I", c.grid.d_I);
    // d_q follows d_V and d_I unless given.
    c.grid.d_q = GridSpec::default_d_q(c.grid.d_V, c.grid.d_I);
    s.get("d_q", c.grid.d_q);
    s.get("encoder_grid_res", c.grid.encoder_grid_res);
    s.get("latent_res", c.grid.latent_res);
    s.get("latent_channels", c.grid.latent_channels);
    s.get("query_density", c.grid.query_density);
    s.get("depth", c.grid.depth);
    s.finish();
  }
  {
    Section s = root.sub("network");
    s.get("point_hidden", c.network.point_hidden);
    s.get("encoder_channels", c.network.encoder_channels);
    s.get("decoder_channels", c.network.decoder_channels);
    s.get("decoder_hidden", c.network.decoder_hidden);
    s.get_enum("pool", c.network.pool, pool_from_string);
    s.get("fusion_hidden", c.network.fusion_hidden);
    s.get("fusion_identity_skip", c.network.fusion_identity_skip);
    s.get("fusion_init_std", c.network.fusion_init_std);
    s.finish();
  }
  {
    Section s = root.sub("sensor");
    s.get_enum("type", c.sensor.type, sensor_type_from_string);
    s.get("width", c.sensor.width);
    s.get("height", c.sensor.height);
    s.get("hfov", c.sensor.hfov);
    s.get("vfov", c.sensor.vfov);
    s.get("max_range", c.sensor.max_range);
    s.finish();
  }
  {
    Section s = root.sub("scene");
    s.get("kind", c.scene.kind);
    s.get("seed", c.scene.seed);
    s.get("frames", c.scene.frames);
    s.get("trajectory_seed", c.scene.trajectory_seed);
    Section t = s.sub("trajectory");
    auto& tr = c.scene.trajectory;
    t.get_enum("style", tr.style, trajectory_style_from_string);
    t.get("height", tr.height);
    t.get("pitch", tr.pitch);
    t.get("radius_fraction", tr.radius_fraction);
    t.get("clearance", tr.clearance);
    t.get("alt_step", tr.alt_step);
    t.finish();
    s.finish();
  }
  {
    Section s = root.sub("noise");
    s.get("sigma_T", c.noise.sigma_T);
    s.get("sigma_Tz", c.noise.sigma_Tz);
    s.get("sigma_yaw", c.noise.sigma_yaw);
    s.get("seed", c.noise.seed);
    s.finish();
  }
  {
    Section s = root.sub("policy");
    s.get("min_update_fraction", c.policy.min_update_fraction);
    s.get("input_subsample_fraction", c.policy.input_subsample_fraction);
    s.get("seed", c.policy.seed);
    s.get("allocate_frustum", c.policy.allocate_frustum);
    s.finish();
  }
  {
    Section s = root.sub("extraction");
    s.get("tau_occ", c.extraction.tau_occ);
    s.get("query_density", c.extraction.query_density);
    s.get("interpolate_boundaries", c.extraction.interpolate_boundaries);
    s.get_enum("blend", c.extraction.blend, blend_space_from_string);
    s.get("use_fusion", c.extraction.use_fusion);
    s.finish();
  }
  {
    Section s = root.sub("tsdf");
    s.get("voxel_size", c.tsdf.voxel_size);
    s.get("truncation", c.tsdf.truncation);
    s.finish();
  }
  {
    Section s = root.sub("metrics");
    s.get("n_samples", c.metrics.n_samples);
    s.get("tau_r", c.metrics.tau_r);
    s.get("exclude_floor", c.metrics.exclude_floor);
    s.get("floor_margin", c.metrics.floor_margin);
    s.get("seed", c.metrics.seed);
    s.finish();
  }
  {
    Section s = root.sub("stage1");
    auto& d = c.stage1.data;
    auto& t = c.stage1.train;
    s.get("shapes", d.shapes);
    s.get("views_per_shape", d.views_per_shape);
    s.get("queries", d.queries);
    s.get("near_surface_fraction", d.near_surface_fraction);
    s.get("near_surface_sigma", d.near_surface_sigma);
    s.get("min_points", d.min_points);
    s.get("max_points", d.max_points);
    s.get("partial_view_fraction", d.partial_view_fraction);
    s.get("kinds", d.kinds);
    s.get("held_out_shapes", c.stage1.held_out_shapes);
    s.get("augment", t.augment);
    s.get("steps", t.steps);
    s.get("batch", t.batch);
    s.get("lr", t.adam.lr);
    s.get("final_lr_fraction", t.final_lr_fraction);
    s.get("warmup_steps", t.warmup_steps);
    s.get("log_every", t.log_every);
    s.get("seed", t.seed);
    s.finish();
  }
  {
    Section s = root.sub("stage2");
    auto& d = c.stage2.data;
    auto& t = c.stage2.train;
    s.get("sequences", c.stage2.sequences);
    s.get("held_out_sequences", c.stage2.held_out_sequences);
    s.get("scans", d.scans);
    s.get("queries_per_voxel", d.queries_per_voxel);
    s.get("alt_step", d.alt_step);
    s.get("orbit_frames", d.orbit_frames);
    s.get("steps", t.steps);
    s.get("batch", t.batch);
    s.get("lr", t.adam.lr);
    s.get("final_lr_fraction", t.final_lr_fraction);
    s.get("log_every", t.log_every);
    s.get("seed", t.seed);
    s.finish();
  }
  {
    Section s = root.sub("compare");
    s.get("sigmas", c.compare.sigmas);
    s.get("sigma_Tz_ratio", c.compare.sigma_Tz_ratio);
    s.get("noise_seed", c.compare.noise_seed);
    s.get("methods", c.compare.methods);
    s.get("gt_trim_radius", c.compare.gt_trim_radius);
    s.finish();
  }
  {
    Section s = root.sub("calibrate");
    s.get("taus", c.calibrate_taus);
    s.finish();
  }
  root.finish();
  c.propagate();
  return c;
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set: expected section.key=value, got '" + assignment + "'");
  const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("--set: empty key in '" + path + "'");
    if (!node->is_object()) throw ConfigError("--set: '" + path + "' descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

RunConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  json j = json::object();
  if (!path.empty()) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open " + path.string());
    try {
      j = json::parse(is, nullptr, true, true);
    } catch (const json::parse_error& e) {
      throw ConfigError("config: " + path.string() + ": " + e.what());
    }
  }
  for (const auto& o : overrides) apply_override(j, o);
  RunConfig c = config_from_json(j);
  c.validate();
  return c;
}

void write_resolved_config(const std::filesystem::path& dir, const RunConfig& cfg) {
  std::filesystem::create_directories(dir);
  std::ofstream os(dir / "config.json");
  if (!os) throw std::runtime_error("cannot write " + (dir / "config.json").string());
  os << to_json(cfg).dump(2) << "\n";
}

}  // namespace latentmap
