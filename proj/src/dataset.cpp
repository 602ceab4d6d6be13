#include "emdet/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "emdet/error.hpp"

namespace emdet {

namespace {

using ojson = nlohmann::ordered_json;

nlohmann::ordered_json box_to_json(const Box& b) { return ojson::array({b.x1(), b.y1(), b.x2(), b.y2()}); }

Box box_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 4) throw InputError("box must be an array [x1,y1,x2,y2]");
  return Box(j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>());
}

const nlohmann::json& field(const nlohmann::json& j, const char* key) {
  if (!j.is_object() || !j.contains(key)) throw InputError(std::string("missing field \"") + key + "\"");
  return j.at(key);
}

}  // namespace

const StrongAnnotation& ImageRecord::strong() const {
  if (const auto* s = std::get_if<StrongAnnotation>(&annotation)) return *s;
  throw InputError("image " + id + " has no instance-level annotation");
}

ImageLabel ImageRecord::image_label() const {
  if (const auto* w = std::get_if<WeakAnnotation>(&annotation)) return w->label;
  std::set<int> cats;
  for (const auto& o : std::get<StrongAnnotation>(annotation).objects) cats.insert(o.category);
  return ImageLabel(std::vector<int>(cats.begin(), cats.end()));
}

bool operator==(const ImageRecord& a, const ImageRecord& b) {
  return a.id == b.id && a.width == b.width && a.height == b.height && a.proposals == b.proposals &&
         a.features.rows() == b.features.rows() && a.features.cols() == b.features.cols() &&
         a.features == b.features && a.annotation == b.annotation;
}

void validate(const ImageRecord& image) {
  const std::string where = "image " + image.id + ": ";
  if (image.id.empty()) throw InputError("image with empty id");
  if (!(image.width > 0.0) || !(image.height > 0.0)) throw InputError(where + "canvas must have positive size");
  if (image.proposals.empty()) throw InputError(where + "no proposals");
  if (image.features.rows() != image.proposal_count()) {
    std::ostringstream os;
    os << where << "features have " << image.features.rows() << " rows but there are " << image.proposal_count()
       << " proposals";
    throw InputError(os.str());
  }
  if (image.features.cols() < 1) throw InputError(where + "empty feature rows");
  if (!image.features.allFinite()) throw InputError(where + "non-finite feature value");
  if (const auto* w = std::get_if<WeakAnnotation>(&image.annotation)) {
    if (w->label.size() == 0) throw InputError(where + "weak label has no positive category");
  } else {
    const auto& s = std::get<StrongAnnotation>(image.annotation);
    if (s.objects.empty()) throw InputError(where + "strong annotation has no objects");
    for (const auto& o : s.objects) {
      if (o.category < 1) throw InputError(where + "object category must be >= 1");
    }
  }
}

ImageRecord demote_to_weak(const ImageRecord& image) {
  ImageRecord out = image;
  out.annotation = WeakAnnotation{image.image_label()};
  return out;
}

ImageRecord flipped(const ImageRecord& image) {
  ImageRecord out = image;
  for (auto& b : out.proposals) b = hflip(b, image.width);
  if (auto* s = std::get_if<StrongAnnotation>(&out.annotation)) {
    for (auto& o : s->objects) o.box = hflip(o.box, image.width);
  }
  return out;
}

int Dataset::feature_dim() const { return images.empty() ? 0 : static_cast<int>(images.front().features.cols()); }

int Dataset::category_count() const {
  int top = 0;
  for (const auto& im : images) {
    const auto label = im.image_label();
    for (int c : label.positives()) top = std::max(top, c);
  }
  return top + 1;
}

std::size_t Dataset::weak_count() const {
  return static_cast<std::size_t>(
      std::count_if(images.begin(), images.end(), [](const ImageRecord& im) { return im.is_weak(); }));
}

nlohmann::ordered_json image_to_json(const ImageRecord& image) {
  ojson j;
  j["id"] = image.id;
  j["width"] = image.width;
  j["height"] = image.height;
  ojson boxes = ojson::array();
  for (const auto& b : image.proposals) boxes.push_back(box_to_json(b));
  j["proposals"] = std::move(boxes);
  ojson feats = ojson::array();
  for (Eigen::Index r = 0; r < image.features.rows(); ++r) {
    ojson row = ojson::array();
    for (Eigen::Index k = 0; k < image.features.cols(); ++k) row.push_back(image.features(r, k));
    feats.push_back(std::move(row));
  }
  j["features"] = std::move(feats);
  ojson ann;
  if (const auto* w = std::get_if<WeakAnnotation>(&image.annotation)) {
    ann["type"] = "weak";
    ann["z"] = w->label.positives();
  } else {
    ann["type"] = "strong";
    ojson objs = ojson::array();
    for (const auto& o : std::get<StrongAnnotation>(image.annotation).objects) {
      ojson obj;
      obj["box"] = box_to_json(o.box);
      obj["category"] = o.category;
      objs.push_back(std::move(obj));
    }
    ann["objects"] = std::move(objs);
  }
  j["annotation"] = std::move(ann);
  return j;
}

ImageRecord image_from_json(const nlohmann::json& j) {
  ImageRecord im;
  im.id = field(j, "id").get<std::string>();
  im.width = field(j, "width").get<double>();
  im.height = field(j, "height").get<double>();
  for (const auto& b : field(j, "proposals")) im.proposals.push_back(box_from_json(b));
  const auto& feats = field(j, "features");
  if (!feats.is_array()) throw InputError("\"features\" must be an array of rows");
  const Eigen::Index rows = static_cast<Eigen::Index>(feats.size());
  const Eigen::Index cols = rows > 0 ? static_cast<Eigen::Index>(feats[0].size()) : 0;
  im.features.resize(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    if (static_cast<Eigen::Index>(feats[r].size()) != cols) throw InputError("feature rows have unequal length");
    for (Eigen::Index k = 0; k < cols; ++k) im.features(r, k) = feats[r][k].get<double>();
  }
  const auto& ann = field(j, "annotation");
  const auto type = field(ann, "type").get<std::string>();
  if (type == "weak") {
    im.annotation = WeakAnnotation{ImageLabel(field(ann, "z").get<std::vector<int>>())};
  } else if (type == "strong") {
    StrongAnnotation s;
    for (const auto& o : field(ann, "objects")) {
      s.objects.push_back({box_from_json(field(o, "box")), field(o, "category").get<int>()});
    }
    im.annotation = std::move(s);
  } else {
    throw InputError("annotation type must be \"weak\" or \"strong\", got \"" + type + "\"");
  }
  validate(im);
  return im;
}

std::string to_jsonl(const Dataset& dataset) {
  std::string out;
  for (const auto& im : dataset.images) {
    out += image_to_json(im).dump();
    out += '\n';
  }
  return out;
}

Dataset from_jsonl(std::istream& in, const std::string& source) {
  Dataset ds;
  std::set<std::string> seen;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      ImageRecord im = image_from_json(nlohmann::json::parse(line));
      if (!seen.insert(im.id).second) throw InputError("duplicate image id \"" + im.id + "\"");
      if (!ds.images.empty() && im.features.cols() != ds.images.front().features.cols()) {
        throw InputError("feature dimension differs from earlier images");
      }
      ds.images.push_back(std::move(im));
    } catch (const nlohmann::json::exception& e) {
      throw InputError(source + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const InputError& e) {
      throw InputError(source + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return ds;
}

void save_dataset(const std::filesystem::path& path, const Dataset& dataset) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write dataset " + path.string());
  out << to_jsonl(dataset);
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open dataset " + path.string());
  return from_jsonl(in, path.string());
}

const Eigen::MatrixXd& InitScores::at(const std::string& image_id) const {
  const auto it = by_image.find(image_id);
  if (it == by_image.end()) throw InputError("no init scores for image \"" + image_id + "\"");
  return it->second;
}

std::string init_scores_to_jsonl(const Dataset& order, const InitScores& scores) {
  std::string out;
  for (const auto& im : order.images) {
    const auto& m = scores.at(im.id);
    ojson j;
    j["id"] = im.id;
    ojson rows = ojson::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      ojson row = ojson::array();
      for (Eigen::Index k = 0; k < m.cols(); ++k) row.push_back(m(r, k));
      rows.push_back(std::move(row));
    }
    j["scores"] = std::move(rows);
    out += j.dump();
    out += '\n';
  }
  return out;
}

InitScores init_scores_from_jsonl(std::istream& in, const std::string& source) {
  InitScores out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const auto id = field(j, "id").get<std::string>();
      const auto& rows = field(j, "scores");
      const Eigen::Index n = static_cast<Eigen::Index>(rows.size());
      const Eigen::Index c = n > 0 ? static_cast<Eigen::Index>(rows[0].size()) : 0;
      Eigen::MatrixXd m(n, c);
      for (Eigen::Index r = 0; r < n; ++r) {
        if (static_cast<Eigen::Index>(rows[r].size()) != c) throw InputError("score rows have unequal length");
        for (Eigen::Index k = 0; k < c; ++k) {
          const double v = rows[r][k].get<double>();
          if (!std::isfinite(v) || v < 0.0) throw InputError("init scores must be finite and non-negative");
          m(r, k) = v;
        }
      }
      if (!out.by_image.emplace(id, std::move(m)).second) throw InputError("duplicate image id \"" + id + "\"");
    } catch (const nlohmann::json::exception& e) {
      throw InputError(source + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const InputError& e) {
      throw InputError(source + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void save_init_scores(const std::filesystem::path& path, const Dataset& order, const InitScores& scores) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write init scores " + path.string());
  out << init_scores_to_jsonl(order, scores);
}

InitScores load_init_scores(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open init scores " + path.string());
  return init_scores_from_jsonl(in, path.string());
}

// --- generation ---------------------------------------------------------------

GeneratorSpec GeneratorSpec::from_json(const nlohmann::json& j) {
  GeneratorSpec s;
  if (!j.is_object()) throw InputError("generator spec must be a JSON object");
  static const std::set<std::string> known = {
      "seed", "train_images", "test_images", "foreground_categories", "proposals_per_image", "feature_dim",
      "noise_sigma", "canvas_width", "canvas_height", "min_object_size", "max_object_size",
      "max_objects_per_image", "jitters_per_object", "min_background_size", "max_background_size"};
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw InputError("unknown generator spec key \"" + k + "\"");
  }
  auto get = [&](const char* key, auto& dst) {
    if (j.contains(key)) dst = j.at(key).get<std::decay_t<decltype(dst)>>();
  };
  try {
    get("seed", s.seed);
    get("train_images", s.train_images);
    get("test_images", s.test_images);
    get("foreground_categories", s.foreground_categories);
    get("proposals_per_image", s.proposals_per_image);
    get("feature_dim", s.feature_dim);
    get("noise_sigma", s.noise_sigma);
    get("canvas_width", s.canvas_width);
    get("canvas_height", s.canvas_height);
    get("min_object_size", s.min_object_size);
    get("max_object_size", s.max_object_size);
    get("max_objects_per_image", s.max_objects_per_image);
    get("jitters_per_object", s.jitters_per_object);
    get("min_background_size", s.min_background_size);
    get("max_background_size", s.max_background_size);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("generator spec: ") + e.what());
  }
  s.validate();
  return s;
}

nlohmann::ordered_json GeneratorSpec::to_json() const {
  ojson j;
  j["seed"] = seed;
  j["train_images"] = train_images;
  j["test_images"] = test_images;
  j["foreground_categories"] = foreground_categories;
  j["proposals_per_image"] = proposals_per_image;
  j["feature_dim"] = feature_dim;
  j["noise_sigma"] = noise_sigma;
  j["canvas_width"] = canvas_width;
  j["canvas_height"] = canvas_height;
  j["min_object_size"] = min_object_size;
  j["max_object_size"] = max_object_size;
  j["max_objects_per_image"] = max_objects_per_image;
  j["jitters_per_object"] = jitters_per_object;
  j["min_background_size"] = min_background_size;
  j["max_background_size"] = max_background_size;
  return j;
}

void GeneratorSpec::validate() const {
  if (foreground_categories < 1) throw InputError("generator spec needs at least one foreground category");
  if (proposals_per_image < 4) throw InputError("generator spec needs at least 4 proposals per image");
  if (feature_dim < foreground_categories + 1) {
    throw InputError("feature_dim must be at least the category count (foreground + background)");
  }
  if (train_images < 0 || test_images < 0) throw InputError("image counts must be non-negative");
  if (!(noise_sigma >= 0.0)) throw InputError("noise_sigma must be non-negative");
  if (!(canvas_width > 0.0 && canvas_height > 0.0)) throw InputError("canvas must have positive size");
  if (!(min_object_size > 0.0 && min_object_size <= max_object_size) ||
      max_object_size > std::min(canvas_width, canvas_height)) {
    throw InputError("object size range must be positive, ordered and fit the canvas");
  }
  if (!(min_background_size > 0.0 && min_background_size <= max_background_size) ||
      max_background_size > std::min(canvas_width, canvas_height)) {
    throw InputError("background size range must be positive, ordered and fit the canvas");
  }
  if (max_objects_per_image < 1) throw InputError("max_objects_per_image must be >= 1");
  if (jitters_per_object < 1) throw InputError("jitters_per_object must be >= 1");
  if (std::min(max_objects_per_image, foreground_categories) * jitters_per_object > proposals_per_image) {
    throw InputError("jittered proposals would exceed proposals_per_image");
  }
}

Eigen::VectorXd category_prototype(int category, int feature_dim) {
  Eigen::VectorXd mu = Eigen::VectorXd::Zero(feature_dim);
  mu(category - 1) = 1.0;
  return mu;
}

namespace {

Box random_box(std::mt19937_64& rng, double w_canvas, double h_canvas, double min_size, double max_size) {
  std::uniform_real_distribution<double> size(min_size, max_size);
  const double w = size(rng);
  const double h = size(rng);
  const double x = std::uniform_real_distribution<double>(0.0, w_canvas - w)(rng);
  const double y = std::uniform_real_distribution<double>(0.0, h_canvas - h)(rng);
  return Box(x, y, x + w, y + h);
}

// Perturbs each edge by up to `spread` times the object extent, clipped to the canvas.
Box jitter_box(std::mt19937_64& rng, const Box& g, double spread, double w_canvas, double h_canvas) {
  std::uniform_real_distribution<double> u(-spread, spread);
  for (;;) {
    double x1 = g.x1() + u(rng) * g.width();
    double x2 = g.x2() + u(rng) * g.width();
    double y1 = g.y1() + u(rng) * g.height();
    double y2 = g.y2() + u(rng) * g.height();
    x1 = std::clamp(x1, 0.0, w_canvas);
    x2 = std::clamp(x2, 0.0, w_canvas);
    y1 = std::clamp(y1, 0.0, h_canvas);
    y2 = std::clamp(y2, 0.0, h_canvas);
    if (x2 - x1 >= 2.0 && y2 - y1 >= 2.0) return Box(x1, y1, x2, y2);
  }
}

ImageRecord generate_image(const GeneratorSpec& spec, std::mt19937_64& rng, const std::string& id) {
  ImageRecord im;
  im.id = id;
  im.width = spec.canvas_width;
  im.height = spec.canvas_height;

  const int max_objects = std::min(spec.max_objects_per_image, spec.foreground_categories);
  const int count = std::uniform_int_distribution<int>(1, max_objects)(rng);
  std::vector<int> cats(spec.foreground_categories);
  std::iota(cats.begin(), cats.end(), 1);
  std::shuffle(cats.begin(), cats.end(), rng);
  cats.resize(count);
  std::sort(cats.begin(), cats.end());

  StrongAnnotation ann;
  for (int c : cats) {
    ann.objects.push_back(
        {random_box(rng, spec.canvas_width, spec.canvas_height, spec.min_object_size, spec.max_object_size), c});
  }

  const int jitters = spec.jitters_per_object;
  for (const auto& o : ann.objects) {
    for (int k = 0; k < jitters; ++k) {
      const double t = jitters == 1 ? 0.0 : static_cast<double>(k) / (jitters - 1);
      const double spread = 0.04 + t * 0.56;
      im.proposals.push_back(jitter_box(rng, o.box, spread, spec.canvas_width, spec.canvas_height));
    }
  }
  while (im.proposal_count() < spec.proposals_per_image) {
    im.proposals.push_back(random_box(rng, spec.canvas_width, spec.canvas_height, spec.min_background_size,
                                      spec.max_background_size));
  }
  std::shuffle(im.proposals.begin(), im.proposals.end(), rng);

  std::normal_distribution<double> noise(0.0, 1.0);
  im.features.resize(im.proposal_count(), spec.feature_dim);
  for (int p = 0; p < im.proposal_count(); ++p) {
    Eigen::VectorXd f = Eigen::VectorXd::Zero(spec.feature_dim);
    for (const auto& o : ann.objects) {
      const double overlap = iou(im.proposals[p], o.box);
      if (overlap >= kCenterOverlap) f += overlap * category_prototype(o.category, spec.feature_dim);
    }
    for (int k = 0; k < spec.feature_dim; ++k) f(k) += spec.noise_sigma * noise(rng);
    im.features.row(p) = f.transpose();
  }
  im.annotation = std::move(ann);
  return im;
}

std::string image_id(const char* prefix, int index) {
  std::ostringstream os;
  os << prefix << '_' << std::setw(5) << std::setfill('0') << index;
  return os.str();
}

}  // namespace

Benchmark generate(const GeneratorSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  Benchmark out;
  for (int i = 0; i < spec.train_images; ++i) out.train.images.push_back(generate_image(spec, rng, image_id("train", i)));
  for (int i = 0; i < spec.test_images; ++i) out.test.images.push_back(generate_image(spec, rng, image_id("test", i)));
  return out;
}

InitScoreSpec InitScoreSpec::from_json(const nlohmann::json& j) {
  InitScoreSpec s;
  auto get = [&](const char* key, auto& dst) {
    if (j.contains(key)) dst = j.at(key).get<std::decay_t<decltype(dst)>>();
  };
  get("seed", s.seed);
  get("overlap_weight", s.overlap_weight);
  get("containment_weight", s.containment_weight);
  get("log_noise_sigma", s.log_noise_sigma);
  get("absent_level", s.absent_level);
  get("floor", s.floor);
  return s;
}

nlohmann::ordered_json InitScoreSpec::to_json() const {
  ojson j;
  j["seed"] = seed;
  j["overlap_weight"] = overlap_weight;
  j["containment_weight"] = containment_weight;
  j["log_noise_sigma"] = log_noise_sigma;
  j["absent_level"] = absent_level;
  j["floor"] = floor;
  return j;
}

InitScores simulate_init_scores(const Dataset& dataset, int foreground_categories, const InitScoreSpec& spec) {
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> noise(0.0, spec.log_noise_sigma);
  InitScores out;
  for (const auto& im : dataset.images) {
    const auto& objects = im.strong().objects;
    Eigen::MatrixXd m(im.proposal_count(), foreground_categories);
    for (int p = 0; p < im.proposal_count(); ++p) {
      const Box& b = im.proposals[p];
      for (int c = 1; c <= foreground_categories; ++c) {
        double base = spec.absent_level;
        for (const auto& o : objects) {
          if (o.category != c) continue;
          const double overlap = iou(b, o.box);
          const double inside = intersection_area(b, o.box) / b.area();
          base = std::max(base, spec.overlap_weight * overlap + spec.containment_weight * inside);
        }
        m(p, c - 1) = std::clamp(base * std::exp(noise(rng)), spec.floor, 1.0);
      }
    }
    out.by_image.emplace(im.id, std::move(m));
  }
  return out;
}

// --- semi-supervised split ----------------------------------------------------

nlohmann::ordered_json SemiSplit::manifest(double fraction, std::uint64_t seed) const {
  ojson j;
  j["strong_fraction"] = fraction;
  j["seed"] = seed;
  j["images"] = dataset.size();
  j["strong_images"] = strong_images;
  j["stratification"] = "lowest category id per image; largest-remainder apportionment";
  ojson strata_json = ojson::array();
  for (const auto& s : strata) {
    ojson e;
    e["category"] = s.category;
    e["images"] = s.images;
    e["strong"] = s.strong;
    strata_json.push_back(std::move(e));
  }
  j["strata"] = std::move(strata_json);
  return j;
}

SemiSplit split_semi(const Dataset& dataset, double strong_fraction, std::uint64_t seed) {
  if (!(strong_fraction >= 0.0 && strong_fraction <= 1.0)) throw InputError("strong fraction must lie in [0, 1]");
  for (const auto& im : dataset.images) {
    if (im.is_weak()) throw InputError("split_semi needs a fully strongly annotated dataset (" + im.id + " is weak)");
  }

  std::map<int, std::vector<std::size_t>> strata;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    strata[dataset.images[i].image_label().positives().front()].push_back(i);
  }

  const auto n = static_cast<double>(dataset.size());
  const int target = static_cast<int>(std::llround(strong_fraction * n));
  struct Quota {
    int category;
    int count;
    double remainder;
  };
  std::vector<Quota> quotas;
  int assigned = 0;
  for (const auto& [cat, members] : strata) {
    const double exact = strong_fraction * static_cast<double>(members.size());
    const int base = static_cast<int>(std::floor(exact));
    quotas.push_back({cat, base, exact - base});
    assigned += base;
  }
  std::vector<std::size_t> order(quotas.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return quotas[a].remainder > quotas[b].remainder; });
  for (std::size_t k = 0; assigned < target && k < order.size(); ++k) {
    auto& q = quotas[order[k]];
    if (q.count < static_cast<int>(strata[q.category].size())) {
      ++q.count;
      ++assigned;
    }
  }

  std::mt19937_64 rng(seed);
  std::vector<bool> keep_strong(dataset.size(), false);
  SemiSplit out;
  for (const auto& q : quotas) {
    auto members = strata[q.category];
    std::shuffle(members.begin(), members.end(), rng);
    for (int k = 0; k < q.count; ++k) keep_strong[members[k]] = true;
    out.strata.push_back({q.category, static_cast<int>(members.size()), q.count});
    out.strong_images += q.count;
  }
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    out.dataset.images.push_back(keep_strong[i] ? dataset.images[i] : demote_to_weak(dataset.images[i]));
  }
  return out;
}

std::string stable_hash(const std::string& text) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

}  // namespace emdet
