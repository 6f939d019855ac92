#include "reldet/clustering.hpp"

#include <algorithm>
#include <cstring>
#include <cmath>
#include <set>
#include <stdexcept>

#include "json.hpp"
#include "reldet/rng.hpp"

namespace reldet {

using nlohmann::json;

std::string to_string(ClusterKind kind) {
  return kind == ClusterKind::window_object ? "window_object" : "layout";
}

ClusterKind cluster_kind_from_string(const std::string& s) {
  if (s == "window_object") return ClusterKind::window_object;
  if (s == "layout") return ClusterKind::layout;
  throw std::invalid_argument("unknown cluster kind: " + s);
}

namespace {

// Relative magnitude of the deterministic tie-breaking jitter. Large enough
// that boundary-degenerate pairs resolve within the stability window, far
// below any non-degenerate structure in the similarities.
constexpr double kTieJitter = 1e-10;

std::vector<double> similarity_matrix(const std::vector<RelLoc>& pts) {
  const size_t n = pts.size();
  std::vector<double> s(n * n, 0.0);
  for (size_t i = 0; i < n; ++i)
    for (size_t k = 0; k < n; ++k)
      if (i != k) s[i * n + k] = -pts[i].squared_distance(pts[k]);
  return s;
}

double median_off_diagonal(const std::vector<double>& s, size_t n) {
  std::vector<double> vals;
  vals.reserve(n * (n - 1));
  for (size_t i = 0; i < n; ++i)
    for (size_t k = 0; k < n; ++k)
      if (i != k) vals.push_back(s[i * n + k]);
  std::sort(vals.begin(), vals.end());
  const size_t m = vals.size();
  return m % 2 == 1 ? vals[m / 2] : 0.5 * (vals[m / 2 - 1] + vals[m / 2]);
}

std::vector<int> extract_exemplars(const std::vector<double>& r, const std::vector<double>& a,
                                   size_t n) {
  std::vector<int> ex;
  for (size_t k = 0; k < n; ++k)
    if (r[k * n + k] + a[k * n + k] > 0.0) ex.push_back(int(k));
  if (ex.empty()) {
    // Degenerate instances (e.g. all-identical points with preference 0)
    // never push any diagonal above zero; keep the best-evidence point.
    size_t best = 0;
    double best_v = r[0] + a[0];
    for (size_t k = 1; k < n; ++k) {
      const double v = r[k * n + k] + a[k * n + k];
      if (v > best_v) {
        best_v = v;
        best = k;
      }
    }
    ex.push_back(int(best));
  }
  return ex;
}

}  // namespace

ClusterModel ap_cluster(const std::vector<RelLoc>& points, const ApOptions& opts) {
  if (points.empty()) throw std::invalid_argument("ap_cluster: need at least one point");
  if (!(opts.damping >= 0.5 && opts.damping < 1.0))
    throw std::invalid_argument("ap_cluster: damping must be in [0.5, 1)");
  if (opts.stable_iter < 1 || opts.max_iter < opts.stable_iter)
    throw std::invalid_argument("ap_cluster: require max_iter >= stable_iter >= 1");

  ClusterModel model;
  model.kind = opts.kind;
  model.damping = opts.damping;
  model.max_iter = opts.max_iter;
  model.stable_iter = opts.stable_iter;

  const size_t n = points.size();
  if (n == 1) {
    model.exemplars = {points[0]};
    model.n_clusters = 1;
    model.preference = std::isnan(opts.preference) ? 0.0 : opts.preference;
    model.converged = true;
    return model;
  }

  std::vector<double> s = similarity_matrix(points);
  const double pref = std::isnan(opts.preference) ? median_off_diagonal(s, n) : opts.preference;
  model.preference = pref;
  for (size_t k = 0; k < n; ++k) s[k * n + k] = pref;

  // Machine-eps tie-breaking jitter, keyed on the input data so identical
  // inputs still give bit-identical models. Without it, symmetric point
  // pairs sit exactly on the exemplar boundary (r+a == 0) and never resolve.
  {
    uint64_t key = 0xcbf29ce484222325ULL;
    auto mix = [&key](double v) {
      uint64_t bits;
      std::memcpy(&bits, &v, sizeof(bits));
      key ^= bits;
      key *= 0x100000001b3ULL;
    };
    for (const RelLoc& p : points)
      for (int d = 0; d < 4; ++d) mix(p[d]);
    mix(pref);
    Rng jitter(key);
    for (size_t i = 0; i < n * n; ++i)
      s[i] += std::abs(s[i]) * kTieJitter * jitter.normal();
  }

  std::vector<double> r(n * n, 0.0), a(n * n, 0.0);
  const double lam = opts.damping;

  std::vector<int> prev_ex;
  int stable = 0;
  bool converged = false;

  for (int iter = 0; iter < opts.max_iter; ++iter) {
    // Responsibilities: r(i,k) = s(i,k) - max_{k' != k} (a(i,k') + s(i,k')).
    for (size_t i = 0; i < n; ++i) {
      double max1 = -std::numeric_limits<double>::infinity();
      double max2 = -std::numeric_limits<double>::infinity();
      size_t arg1 = 0;
      for (size_t k = 0; k < n; ++k) {
        const double v = a[i * n + k] + s[i * n + k];
        if (v > max1) {
          max2 = max1;
          max1 = v;
          arg1 = k;
        } else if (v > max2) {
          max2 = v;
        }
      }
      for (size_t k = 0; k < n; ++k) {
        const double cap = (k == arg1) ? max2 : max1;
        r[i * n + k] = lam * r[i * n + k] + (1.0 - lam) * (s[i * n + k] - cap);
      }
    }

    // Availabilities: a(i,k) = min(0, r(k,k) + sum_{i' not in {i,k}} max(0, r(i',k)));
    // a(k,k) = sum_{i' != k} max(0, r(i',k)).
    for (size_t k = 0; k < n; ++k) {
      double pos_sum = 0.0;
      for (size_t i = 0; i < n; ++i)
        if (i != k) pos_sum += std::max(0.0, r[i * n + k]);
      for (size_t i = 0; i < n; ++i) {
        double v;
        if (i == k) {
          v = pos_sum;
        } else {
          v = r[k * n + k] + pos_sum - std::max(0.0, r[i * n + k]);
          v = std::min(0.0, v);
        }
        a[i * n + k] = lam * a[i * n + k] + (1.0 - lam) * v;
      }
    }

    std::vector<int> ex = extract_exemplars(r, a, n);
    if (ex == prev_ex) {
      if (++stable >= opts.stable_iter) {
        converged = true;
        break;
      }
    } else {
      stable = 0;
      prev_ex = std::move(ex);
    }
  }

  model.converged = converged;
  std::vector<int> ex = extract_exemplars(r, a, n);

  // Final medoid refinement (as in the reference AP procedure): assign every
  // point to its best exemplar, then move each exemplar to the member that
  // maximizes the within-cluster similarity sum.
  {
    std::vector<int> cluster_of(n, -1);
    for (size_t e = 0; e < ex.size(); ++e) cluster_of[size_t(ex[e])] = int(e);
    for (size_t i = 0; i < n; ++i) {
      if (cluster_of[i] >= 0) continue;
      int best = 0;
      double best_s = -std::numeric_limits<double>::infinity();
      for (size_t e = 0; e < ex.size(); ++e) {
        const double v = s[i * n + size_t(ex[e])];
        if (v > best_s) {
          best_s = v;
          best = int(e);
        }
      }
      cluster_of[i] = best;
    }
    for (size_t e = 0; e < ex.size(); ++e) {
      std::vector<size_t> members;
      for (size_t i = 0; i < n; ++i)
        if (cluster_of[i] == int(e)) members.push_back(i);
      int best = ex[e];
      double best_sum = -std::numeric_limits<double>::infinity();
      for (size_t j : members) {
        double sum = 0.0;
        for (size_t i : members)
          if (i != j) sum += s[i * n + j];
        if (sum > best_sum) {
          best_sum = sum;
          best = int(j);
        }
      }
      ex[e] = best;
    }
    std::sort(ex.begin(), ex.end());
  }

  // Duplicate points can both peak; keep exemplar coordinates distinct.
  std::vector<RelLoc> uniq;
  for (int k : ex) {
    bool dup = false;
    for (const RelLoc& e : uniq)
      if (e.squared_distance(points[k]) == 0.0) dup = true;
    if (!dup) uniq.push_back(points[k]);
  }
  model.exemplars = std::move(uniq);
  model.n_clusters = int(model.exemplars.size());
  return model;
}

int assign(const ClusterModel& model, const RelLoc& p) {
  if (!model.fitted()) throw std::logic_error("assign: model is not fitted");
  int best = 0;
  double best_d = model.exemplars[0].squared_distance(p);
  for (int j = 1; j < model.n_clusters; ++j) {
    const double d = model.exemplars[j].squared_distance(p);
    if (d < best_d) {
      best_d = d;
      best = j;
    }
  }
  return best;
}

ClusterStats cluster_stats(const ClusterModel& model, const std::vector<RelLoc>& points) {
  if (!model.fitted()) throw std::logic_error("cluster_stats: model is not fitted");
  ClusterStats st;
  st.counts.assign(model.n_clusters, 0);
  st.means.assign(model.n_clusters, RelLoc());
  st.mean_distances.assign(model.n_clusters, 0.0);
  for (const RelLoc& p : points) {
    const int j = assign(model, p);
    st.counts[j] += 1;
    for (int d = 0; d < 4; ++d) st.means[j][d] += p[d];
    st.mean_distances[j] += std::sqrt(p.squared_distance(model.exemplars[j]));
  }
  for (int j = 0; j < model.n_clusters; ++j) {
    if (st.counts[j] > 0) {
      for (int d = 0; d < 4; ++d) st.means[j][d] /= st.counts[j];
      st.mean_distances[j] /= st.counts[j];
    }
  }
  return st;
}

double net_similarity(const std::vector<RelLoc>& points, const std::vector<int>& exemplar_idx,
                      double preference) {
  double total = preference * double(exemplar_idx.size());
  for (size_t i = 0; i < points.size(); ++i) {
    if (std::find(exemplar_idx.begin(), exemplar_idx.end(), int(i)) != exemplar_idx.end())
      continue;
    double best = -std::numeric_limits<double>::infinity();
    for (int k : exemplar_idx) best = std::max(best, -points[i].squared_distance(points[k]));
    total += best;
  }
  return total;
}

int WindowObjectClusters::total_clusters() const {
  int total = 0;
  for (const auto& m : models) total += m.n_clusters;
  return total;
}

int WindowObjectClusters::assign_global(int class_id, const RelLoc& p) const {
  if (models.empty()) throw std::logic_error("WindowObjectClusters: empty");
  if (!per_class) return offsets[0] + assign(models[0], p);
  for (size_t i = 0; i < class_ids.size(); ++i)
    if (class_ids[i] == class_id) return offsets[i] + assign(models[i], p);
  throw std::invalid_argument("WindowObjectClusters: no model for class " +
                              std::to_string(class_id));
}

namespace {

std::vector<RelLoc> subsample(const std::vector<RelLoc>& pts, int cap) {
  if (int(pts.size()) <= cap) return pts;
  // Deterministic stride subsample preserving order.
  std::vector<RelLoc> out;
  out.reserve(cap);
  const double step = double(pts.size()) / cap;
  for (int i = 0; i < cap; ++i) out.push_back(pts[size_t(i * step)]);
  return out;
}

}  // namespace

WindowObjectClusters fit_window_object_clusters(
    const std::vector<std::pair<int, RelLoc>>& class_points, const ApOptions& opts,
    int min_per_class, int max_points_per_fit, int target_lo, int target_hi) {
  if (class_points.empty())
    throw std::invalid_argument("fit_window_object_clusters: no points");

  std::map<int, std::vector<RelLoc>> by_class;
  for (const auto& [c, p] : class_points) by_class[c].push_back(p);

  bool per_class = true;
  for (const auto& [c, pts] : by_class)
    if (int(pts.size()) < min_per_class) per_class = false;
  if (by_class.size() < 2) per_class = false;

  WindowObjectClusters set;
  set.per_class = per_class;
  ApOptions o = opts;
  o.kind = ClusterKind::window_object;

  auto fit_one = [&](const std::vector<RelLoc>& pts) {
    const std::vector<RelLoc> sub = subsample(pts, max_points_per_fit);
    if (target_hi > 0) return ap_cluster_target_range(sub, o, target_lo, target_hi);
    return ap_cluster(sub, o);
  };

  if (per_class) {
    int offset = 1;
    for (const auto& [c, pts] : by_class) {
      ClusterModel m = fit_one(pts);
      set.class_ids.push_back(c);
      set.offsets.push_back(offset);
      offset += m.n_clusters;
      set.models.push_back(std::move(m));
    }
  } else {
    std::vector<RelLoc> all;
    for (const auto& [c, p] : class_points) all.push_back(p);
    set.class_ids.push_back(0);
    set.offsets.push_back(1);
    set.models.push_back(fit_one(all));
  }
  return set;
}

ClusterModel ap_cluster_target_range(const std::vector<RelLoc>& points, const ApOptions& opts,
                                     int lo, int hi, int max_trials) {
  ApOptions o = opts;
  ClusterModel first = ap_cluster(points, o);
  if (first.n_clusters >= lo && first.n_clusters <= hi) return first;

  ClusterModel best = first;
  auto range_distance = [&](const ClusterModel& m) {
    if (m.n_clusters < lo) return lo - m.n_clusters;
    if (m.n_clusters > hi) return m.n_clusters - hi;
    return 0;
  };

  double pref = first.preference;
  for (int t = 1; t < max_trials; ++t) {
    // Similarities are non-positive: more negative preference -> fewer exemplars.
    pref = (best.n_clusters > hi) ? pref * 2.0 : pref * 0.5;
    if (pref == 0.0) break;
    o.preference = pref;
    ClusterModel m = ap_cluster(points, o);
    if (range_distance(m) < range_distance(best)) best = m;
    if (range_distance(best) == 0) break;
  }
  return best;
}

namespace {

json model_to_jobj(const ClusterModel& m) {
  json exs = json::array();
  for (const RelLoc& e : m.exemplars) exs.push_back({e.dx, e.dy, e.dw, e.dh});
  return json{{"kind", to_string(m.kind)},
              {"n_clusters", m.n_clusters},
              {"preference", m.preference},
              {"damping", m.damping},
              {"max_iter", m.max_iter},
              {"stable_iter", m.stable_iter},
              {"converged", m.converged},
              {"exemplars", exs}};
}

ClusterModel model_from_jobj(const json& j) {
  ClusterModel m;
  m.kind = cluster_kind_from_string(j.at("kind").get<std::string>());
  m.n_clusters = j.at("n_clusters").get<int>();
  m.preference = j.at("preference").get<double>();
  m.damping = j.at("damping").get<double>();
  m.max_iter = j.at("max_iter").get<int>();
  m.stable_iter = j.at("stable_iter").get<int>();
  m.converged = j.at("converged").get<bool>();
  for (const auto& e : j.at("exemplars"))
    m.exemplars.emplace_back(e[0].get<double>(), e[1].get<double>(), e[2].get<double>(),
                             e[3].get<double>());
  if (int(m.exemplars.size()) != m.n_clusters)
    throw std::runtime_error("cluster model: exemplar count mismatch");
  return m;
}

}  // namespace

std::string cluster_model_to_json(const ClusterModel& model) {
  return model_to_jobj(model).dump(2);
}

ClusterModel cluster_model_from_json(const std::string& text) {
  return model_from_jobj(json::parse(text));
}

std::string window_object_clusters_to_json(const WindowObjectClusters& set) {
  json models = json::array();
  for (const auto& m : set.models) models.push_back(model_to_jobj(m));
  json j{{"per_class", set.per_class},
         {"class_ids", set.class_ids},
         {"offsets", set.offsets},
         {"models", models}};
  return j.dump(2);
}

WindowObjectClusters window_object_clusters_from_json(const std::string& text) {
  const json j = json::parse(text);
  WindowObjectClusters set;
  set.per_class = j.at("per_class").get<bool>();
  set.class_ids = j.at("class_ids").get<std::vector<int>>();
  set.offsets = j.at("offsets").get<std::vector<int>>();
  for (const auto& m : j.at("models")) set.models.push_back(model_from_jobj(m));
  return set;
}

}  // namespace reldet
