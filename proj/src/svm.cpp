#include "reldet/svm.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

namespace reldet {

using nlohmann::json;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

double LinearSvm::score(const double* x, int dim) const {
  double s = b;
  if (!mean.empty()) {
    for (int j = 0; j < dim; ++j) s += w[j] * (x[j] - mean[j]) * scale[j];
  } else {
    for (int j = 0; j < dim; ++j) s += w[j] * x[j];
  }
  return s;
}

LinearSvm train_svm(const std::vector<double>& xs, int n, int dim, const std::vector<int>& ys,
                    const SvmTrainConfig& cfg) {
  if (n <= 0 || dim <= 0 || xs.size() != size_t(n) * dim || int(ys.size()) != n)
    throw std::invalid_argument("train_svm: inconsistent input sizes");

  LinearSvm model;
  model.present = true;
  model.w.assign(dim, 0.0);

  RowMat X = Eigen::Map<const RowMat>(xs.data(), n, dim);
  if (cfg.standardize) {
    model.mean.resize(dim);
    model.scale.resize(dim);
    for (int j = 0; j < dim; ++j) {
      const double mu = X.col(j).mean();
      const double var = (X.col(j).array() - mu).square().mean();
      model.mean[j] = mu;
      model.scale[j] = 1.0 / std::max(std::sqrt(var), 1e-6);
      X.col(j) = (X.col(j).array() - mu) * model.scale[j];
    }
  }

  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) y[i] = ys[i] > 0 ? 1.0 : -1.0;

  Eigen::VectorXd w = Eigen::VectorXd::Zero(dim);
  double b = 0.0;
  Eigen::VectorXd margins(n), active_y(n);

  for (int t = 0; t < cfg.epochs; ++t) {
    margins.noalias() = X * w;
    margins.array() += b;
    margins.array() *= y.array();
    for (int i = 0; i < n; ++i) active_y[i] = margins[i] < 1.0 ? y[i] : 0.0;

    Eigen::VectorXd gw = cfg.reg * w - (X.transpose() * active_y) / double(n);
    const double gb = -active_y.sum() / double(n);
    const double lr = cfg.lr0 / (1.0 + cfg.lr_decay * double(t));
    w.noalias() -= lr * gw;
    b -= lr * gb;
  }

  for (int j = 0; j < dim; ++j) model.w[j] = w[j];
  model.b = b;
  return model;
}

json svm_to_json(const LinearSvm& m) {
  return json{{"present", m.present}, {"w", m.w},         {"b", m.b},
              {"mean", m.mean},       {"scale", m.scale}};
}

LinearSvm svm_from_json(const json& j) {
  LinearSvm m;
  m.present = j.at("present").get<bool>();
  m.w = j.at("w").get<std::vector<double>>();
  m.b = j.at("b").get<double>();
  m.mean = j.at("mean").get<std::vector<double>>();
  m.scale = j.at("scale").get<std::vector<double>>();
  return m;
}

}  // namespace reldet
