#include "ulp/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ulp/errors.hpp"

namespace ulp::nn {

namespace {

std::atomic<uint64_t> g_forward_images{0};

class Conv2d final : public Layer {
 public:
  Conv2d(Shape3 in, int cout, int kernel, int stride, std::string name)
      : in_(in), cout_(cout), k_(kernel), stride_(stride), name_(std::move(name)) {
    if (in.size() <= 0) throw DimensionError("conv input shape must be positive");
    if (kernel < 1 || kernel % 2 == 0)
      throw DimensionError("conv kernel must be odd and positive");
    if (stride < 1) throw DimensionError("conv stride must be >= 1");
    if (cout < 1) throw DimensionError("conv needs at least one output channel");
    // 'same' padding: output spatial dims are ceil(in / stride).
    oh_ = (in.h + stride - 1) / stride;
    ow_ = (in.w + stride - 1) / stride;
    pad_h_ = std::max(0, ((oh_ - 1) * stride + kernel - in.h) / 2);
    pad_w_ = std::max(0, ((ow_ - 1) * stride + kernel - in.w) / 2);
    weight_ = Mat::Zero(k_ * k_ * in_.c, cout_);
    bias_ = Mat::Zero(1, cout_);
  }

  std::string kind() const override { return "conv2d"; }
  Shape3 output_shape() const override { return {oh_, ow_, cout_}; }

  Mat forward(const Mat& x, LayerState& st) const override {
    const int B = static_cast<int>(x.rows());
    st.m0 = im2col(x);
    Mat y = st.m0 * weight_;  // (B*oh*ow) x cout
    y.rowwise() += bias_.row(0);
    return Eigen::Map<const Mat>(y.data(), B, oh_ * ow_ * cout_);
  }

  Mat backward(const Mat& dy, const LayerState& st, std::vector<Mat>* pg) const override {
    const int B = static_cast<int>(dy.rows());
    Eigen::Map<const Mat> dym(dy.data(), static_cast<Eigen::Index>(B) * oh_ * ow_, cout_);
    if (pg) {
      (*pg)[0].noalias() += st.m0.transpose() * dym;
      (*pg)[1].row(0) += dym.colwise().sum();
    }
    Mat dcol = dym * weight_.transpose();
    return col2im(dcol, B);
  }

  std::vector<Mat*> params() override { return {&weight_, &bias_}; }
  std::vector<const Mat*> params() const override { return {&weight_, &bias_}; }
  std::vector<std::string> param_names() const override {
    return {name_ + ".weight", name_ + ".bias"};
  }

 private:
  Mat im2col(const Mat& x) const {
    const int B = static_cast<int>(x.rows());
    Mat col = Mat::Zero(static_cast<Eigen::Index>(B) * oh_ * ow_, k_ * k_ * in_.c);
    for (int b = 0; b < B; ++b) {
      const double* src = x.data() + static_cast<size_t>(b) * in_.size();
      for (int oy = 0; oy < oh_; ++oy) {
        for (int ox = 0; ox < ow_; ++ox) {
          double* dst = col.data() +
                        (static_cast<size_t>(b) * oh_ * ow_ + static_cast<size_t>(oy) * ow_ + ox) *
                            (k_ * k_ * in_.c);
          for (int ky = 0; ky < k_; ++ky) {
            const int iy = oy * stride_ - pad_h_ + ky;
            if (iy < 0 || iy >= in_.h) continue;
            for (int kx = 0; kx < k_; ++kx) {
              const int ix = ox * stride_ - pad_w_ + kx;
              if (ix < 0 || ix >= in_.w) continue;
              std::copy_n(src + (static_cast<size_t>(iy) * in_.w + ix) * in_.c, in_.c,
                          dst + (static_cast<size_t>(ky) * k_ + kx) * in_.c);
            }
          }
        }
      }
    }
    return col;
  }

  Mat col2im(const Mat& dcol, int B) const {
    Mat dx = Mat::Zero(B, in_.size());
    for (int b = 0; b < B; ++b) {
      double* dst = dx.data() + static_cast<size_t>(b) * in_.size();
      for (int oy = 0; oy < oh_; ++oy) {
        for (int ox = 0; ox < ow_; ++ox) {
          const double* src =
              dcol.data() +
              (static_cast<size_t>(b) * oh_ * ow_ + static_cast<size_t>(oy) * ow_ + ox) *
                  (k_ * k_ * in_.c);
          for (int ky = 0; ky < k_; ++ky) {
            const int iy = oy * stride_ - pad_h_ + ky;
            if (iy < 0 || iy >= in_.h) continue;
            for (int kx = 0; kx < k_; ++kx) {
              const int ix = ox * stride_ - pad_w_ + kx;
              if (ix < 0 || ix >= in_.w) continue;
              double* d = dst + (static_cast<size_t>(iy) * in_.w + ix) * in_.c;
              const double* s = src + (static_cast<size_t>(ky) * k_ + kx) * in_.c;
              for (int c = 0; c < in_.c; ++c) d[c] += s[c];
            }
          }
        }
      }
    }
    return dx;
  }

  Shape3 in_;
  int cout_, k_, stride_;
  int oh_, ow_, pad_h_, pad_w_;
  std::string name_;
  Mat weight_, bias_;
};

class Relu final : public Layer {
 public:
  explicit Relu(Shape3 in) : in_(in) {}
  std::string kind() const override { return "relu"; }
  Shape3 output_shape() const override { return in_; }

  Mat forward(const Mat& x, LayerState& st) const override {
    st.m0 = x.cwiseMax(0.0);
    return st.m0;
  }

  Mat backward(const Mat& dy, const LayerState& st, std::vector<Mat>*) const override {
    return (st.m0.array() > 0.0).select(dy, 0.0);
  }

 private:
  Shape3 in_;
};

class MaxPool2 final : public Layer {
 public:
  explicit MaxPool2(Shape3 in) : in_(in), out_{in.h / 2, in.w / 2, in.c} {
    if (out_.h < 1 || out_.w < 1) throw DimensionError("maxpool input too small");
  }
  std::string kind() const override { return "maxpool2"; }
  Shape3 output_shape() const override { return out_; }

  Mat forward(const Mat& x, LayerState& st) const override {
    const int B = static_cast<int>(x.rows());
    Mat y(B, out_.size());
    st.iv.assign(static_cast<size_t>(B) * out_.size(), 0);
    for (int b = 0; b < B; ++b) {
      const double* src = x.data() + static_cast<size_t>(b) * in_.size();
      double* dst = y.data() + static_cast<size_t>(b) * out_.size();
      int* arg = st.iv.data() + static_cast<size_t>(b) * out_.size();
      for (int oy = 0; oy < out_.h; ++oy) {
        for (int ox = 0; ox < out_.w; ++ox) {
          for (int c = 0; c < in_.c; ++c) {
            double best = -std::numeric_limits<double>::infinity();
            int best_idx = 0;
            for (int dy2 = 0; dy2 < 2; ++dy2) {
              for (int dx2 = 0; dx2 < 2; ++dx2) {
                const int idx = ((oy * 2 + dy2) * in_.w + (ox * 2 + dx2)) * in_.c + c;
                if (src[idx] > best) {
                  best = src[idx];
                  best_idx = idx;
                }
              }
            }
            dst[(oy * out_.w + ox) * in_.c + c] = best;
            arg[(oy * out_.w + ox) * in_.c + c] = best_idx;
          }
        }
      }
    }
    return y;
  }

  Mat backward(const Mat& dy, const LayerState& st, std::vector<Mat>*) const override {
    const int B = static_cast<int>(dy.rows());
    Mat dx = Mat::Zero(B, in_.size());
    for (int b = 0; b < B; ++b) {
      const double* s = dy.data() + static_cast<size_t>(b) * out_.size();
      double* d = dx.data() + static_cast<size_t>(b) * in_.size();
      const int* arg = st.iv.data() + static_cast<size_t>(b) * out_.size();
      for (int i = 0; i < out_.size(); ++i) d[arg[i]] += s[i];
    }
    return dx;
  }

 private:
  Shape3 in_, out_;
};

class Dense final : public Layer {
 public:
  Dense(int in_features, int out_features, std::string name)
      : in_features_(in_features), name_(std::move(name)) {
    if (in_features < 1 || out_features < 1) throw DimensionError("dense dims must be positive");
    weight_ = Mat::Zero(in_features, out_features);
    bias_ = Mat::Zero(1, out_features);
  }
  std::string kind() const override { return "dense"; }
  Shape3 output_shape() const override { return {1, 1, static_cast<int>(weight_.cols())}; }

  Mat forward(const Mat& x, LayerState& st) const override {
    st.m0 = x;
    Mat y = x * weight_;
    y.rowwise() += bias_.row(0);
    return y;
  }

  Mat backward(const Mat& dy, const LayerState& st, std::vector<Mat>* pg) const override {
    if (pg) {
      (*pg)[0].noalias() += st.m0.transpose() * dy;
      (*pg)[1].row(0) += dy.colwise().sum();
    }
    return dy * weight_.transpose();
  }

  std::vector<Mat*> params() override { return {&weight_, &bias_}; }
  std::vector<const Mat*> params() const override { return {&weight_, &bias_}; }
  std::vector<std::string> param_names() const override {
    return {name_ + ".weight", name_ + ".bias"};
  }

 private:
  int in_features_;
  std::string name_;
  Mat weight_, bias_;
};

class GlobalAvgPool final : public Layer {
 public:
  explicit GlobalAvgPool(Shape3 in) : in_(in) {}
  std::string kind() const override { return "gap"; }
  Shape3 output_shape() const override { return {1, 1, in_.c}; }

  Mat forward(const Mat& x, LayerState&) const override {
    const int B = static_cast<int>(x.rows());
    const int P = in_.h * in_.w;
    Mat y = Mat::Zero(B, in_.c);
    for (int b = 0; b < B; ++b) {
      const double* src = x.data() + static_cast<size_t>(b) * in_.size();
      double* dst = y.data() + static_cast<size_t>(b) * in_.c;
      for (int p = 0; p < P; ++p)
        for (int c = 0; c < in_.c; ++c) dst[c] += src[p * in_.c + c];
      for (int c = 0; c < in_.c; ++c) dst[c] /= P;
    }
    return y;
  }

  Mat backward(const Mat& dy, const LayerState&, std::vector<Mat>*) const override {
    const int B = static_cast<int>(dy.rows());
    const int P = in_.h * in_.w;
    Mat dx(B, in_.size());
    for (int b = 0; b < B; ++b) {
      const double* s = dy.data() + static_cast<size_t>(b) * in_.c;
      double* d = dx.data() + static_cast<size_t>(b) * in_.size();
      for (int p = 0; p < P; ++p)
        for (int c = 0; c < in_.c; ++c) d[p * in_.c + c] = s[c] / P;
    }
    return dx;
  }

 private:
  Shape3 in_;
};

// conv-relu-conv plus identity (or 1x1 projection) skip, relu on the sum.
class ResidualBlock final : public Layer {
 public:
  ResidualBlock(Shape3 in, int channels, int kernel, int stride, const std::string& name)
      : in_(in) {
    conv1_ = std::make_unique<Conv2d>(in, channels, kernel, stride, name + ".conv1");
    const Shape3 mid = conv1_->output_shape();
    conv2_ = std::make_unique<Conv2d>(mid, channels, kernel, 1, name + ".conv2");
    out_ = conv2_->output_shape();
    if (stride != 1 || in.c != channels)
      proj_ = std::make_unique<Conv2d>(in, channels, 1, stride, name + ".proj");
  }

  std::string kind() const override { return "residual"; }
  Shape3 output_shape() const override { return out_; }

  Mat forward(const Mat& x, LayerState& st) const override {
    st.kids.resize(3);
    Mat a = conv1_->forward(x, st.kids[0]);
    st.m0 = a.cwiseMax(0.0);
    Mat main = conv2_->forward(st.m0, st.kids[1]);
    Mat skip = proj_ ? proj_->forward(x, st.kids[2]) : x;
    st.m1 = (main + skip).cwiseMax(0.0);
    return st.m1;
  }

  Mat backward(const Mat& dy, const LayerState& st, std::vector<Mat>* pg) const override {
    Mat dsum = (st.m1.array() > 0.0).select(dy, 0.0);
    std::vector<Mat> pg1, pg2, pgp;
    std::vector<Mat>* p1 = nullptr;
    std::vector<Mat>* p2 = nullptr;
    std::vector<Mat>* pp = nullptr;
    if (pg) {
      // Split the flat gradient buffer among the sub-convs.
      p1 = &pg1;
      p2 = &pg2;
      pg1 = {std::move((*pg)[0]), std::move((*pg)[1])};
      pg2 = {std::move((*pg)[2]), std::move((*pg)[3])};
      if (proj_) {
        pp = &pgp;
        pgp = {std::move((*pg)[4]), std::move((*pg)[5])};
      }
    }
    Mat dmid = conv2_->backward(dsum, st.kids[1], p2);
    Mat da = (st.m0.array() > 0.0).select(dmid, 0.0);
    Mat dx = conv1_->backward(da, st.kids[0], p1);
    if (proj_) {
      dx += proj_->backward(dsum, st.kids[2], pp);
    } else {
      dx += dsum;
    }
    if (pg) {
      (*pg)[0] = std::move(pg1[0]);
      (*pg)[1] = std::move(pg1[1]);
      (*pg)[2] = std::move(pg2[0]);
      (*pg)[3] = std::move(pg2[1]);
      if (proj_) {
        (*pg)[4] = std::move(pgp[0]);
        (*pg)[5] = std::move(pgp[1]);
      }
    }
    return dx;
  }

  std::vector<Mat*> params() override {
    std::vector<Mat*> out = conv1_->params();
    for (Mat* p : conv2_->params()) out.push_back(p);
    if (proj_)
      for (Mat* p : proj_->params()) out.push_back(p);
    return out;
  }
  std::vector<const Mat*> params() const override {
    std::vector<const Mat*> out = std::as_const(*conv1_).params();
    for (const Mat* p : std::as_const(*conv2_).params()) out.push_back(p);
    if (proj_)
      for (const Mat* p : std::as_const(*proj_).params()) out.push_back(p);
    return out;
  }
  std::vector<std::string> param_names() const override {
    std::vector<std::string> out = conv1_->param_names();
    for (auto& n : conv2_->param_names()) out.push_back(n);
    if (proj_)
      for (auto& n : proj_->param_names()) out.push_back(n);
    return out;
  }

 private:
  Shape3 in_, out_;
  std::unique_ptr<Conv2d> conv1_, conv2_, proj_;
};

}  // namespace

std::unique_ptr<Layer> make_conv2d(Shape3 in, int out_channels, int kernel, int stride,
                                   const std::string& name) {
  return std::make_unique<Conv2d>(in, out_channels, kernel, stride, name);
}
std::unique_ptr<Layer> make_relu(Shape3 in) { return std::make_unique<Relu>(in); }
std::unique_ptr<Layer> make_maxpool2(Shape3 in) { return std::make_unique<MaxPool2>(in); }
std::unique_ptr<Layer> make_dense(int in_features, int out_features, const std::string& name) {
  return std::make_unique<Dense>(in_features, out_features, name);
}
std::unique_ptr<Layer> make_global_avg_pool(Shape3 in) {
  return std::make_unique<GlobalAvgPool>(in);
}
std::unique_ptr<Layer> make_residual_block(Shape3 in, int channels, int kernel, int stride,
                                           const std::string& name) {
  return std::make_unique<ResidualBlock>(in, channels, kernel, stride, name);
}

void Network::add(std::unique_ptr<Layer> layer) { layers_.push_back(std::move(layer)); }

Mat Network::forward(const Mat& x) const {
  g_forward_images += static_cast<uint64_t>(x.rows());
  LayerState scratch;
  Mat y = x;
  for (const auto& l : layers_) {
    scratch = LayerState{};
    y = l->forward(y, scratch);
  }
  return y;
}

Mat Network::forward(const Mat& x, ForwardCtx& ctx) const {
  g_forward_images += static_cast<uint64_t>(x.rows());
  ctx.states.assign(layers_.size(), LayerState{});
  Mat y = x;
  const double rate = ctx.dropout.rate;
  for (size_t i = 0; i < layers_.size(); ++i) {
    y = layers_[i]->forward(y, ctx.states[i]);
    if (layers_[i]->block_boundary && rate > 0.0) {
      if (!ctx.dropout.rng) throw InvalidArgument("dropout requires an rng");
      Mat mask(y.rows(), y.cols());
      const double keep = 1.0 - rate;
      for (Eigen::Index j = 0; j < mask.size(); ++j)
        mask.data()[j] = ctx.dropout.rng->bernoulli(keep) ? 1.0 / keep : 0.0;
      ctx.states[i].dropout_mask = mask;
      y = y.cwiseProduct(mask);
    }
  }
  return y;
}

Mat Network::backward(const Mat& dlogits, ForwardCtx& ctx, std::vector<Mat>* pg,
                      bool want_dx) const {
  if (ctx.states.size() != layers_.size())
    throw InvalidArgument("backward without matching forward ctx");
  Mat dy = dlogits;
  size_t grad_end = pg ? pg->size() : 0;
  for (size_t i = layers_.size(); i-- > 0;) {
    if (ctx.states[i].dropout_mask.size() > 0)
      dy = dy.cwiseProduct(ctx.states[i].dropout_mask);
    std::vector<Mat>* layer_pg = nullptr;
    std::vector<Mat> slice;
    const size_t n_params = layers_[i]->param_names().size();
    if (pg && n_params > 0) {
      slice.reserve(n_params);
      for (size_t j = grad_end - n_params; j < grad_end; ++j) slice.push_back(std::move((*pg)[j]));
      layer_pg = &slice;
    }
    if (i == 0 && !want_dx && n_params == 0) break;
    dy = layers_[i]->backward(dy, ctx.states[i], layer_pg);
    if (pg && n_params > 0) {
      for (size_t j = 0; j < n_params; ++j) (*pg)[grad_end - n_params + j] = std::move(slice[j]);
      grad_end -= n_params;
    }
  }
  return dy;
}

std::vector<Mat*> Network::params() {
  std::vector<Mat*> out;
  for (auto& l : layers_)
    for (Mat* p : l->params()) out.push_back(p);
  return out;
}

std::vector<const Mat*> Network::params() const {
  std::vector<const Mat*> out;
  for (const auto& l : layers_)
    for (const Mat* p : std::as_const(*l).params()) out.push_back(p);
  return out;
}

std::vector<std::string> Network::param_names() const {
  std::vector<std::string> out;
  for (const auto& l : layers_)
    for (auto& n : l->param_names()) out.push_back(n);
  return out;
}

std::vector<Mat> Network::grad_buffers() const {
  std::vector<Mat> out;
  for (const Mat* p : params()) out.push_back(Mat::Zero(p->rows(), p->cols()));
  return out;
}

Mat softmax(const Mat& logits) {
  Mat p = logits;
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    const double mx = p.row(r).maxCoeff();
    p.row(r) = (p.row(r).array() - mx).exp();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

double softmax_xent(const Mat& logits, const std::vector<int>& labels, Mat* dlogits) {
  if (static_cast<size_t>(logits.rows()) != labels.size())
    throw DimensionError("labels do not match batch size");
  const Mat p = softmax(logits);
  const double B = static_cast<double>(logits.rows());
  double loss = 0.0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const int y = labels[static_cast<size_t>(r)];
    if (y < 0 || y >= logits.cols()) throw InvalidArgument("label out of logit range");
    loss -= std::log(std::max(p(r, y), 1e-300));
  }
  loss /= B;
  if (dlogits) {
    *dlogits = p / B;
    for (Eigen::Index r = 0; r < logits.rows(); ++r)
      (*dlogits)(r, labels[static_cast<size_t>(r)]) -= 1.0 / B;
  }
  return loss;
}

std::vector<int> argmax_rows(const Mat& m) {
  std::vector<int> out(static_cast<size_t>(m.rows()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    Eigen::Index c;
    m.row(r).maxCoeff(&c);
    out[static_cast<size_t>(r)] = static_cast<int>(c);
  }
  return out;
}

double accuracy(const Mat& logits, const std::vector<int>& labels) {
  const auto pred = argmax_rows(logits);
  size_t hit = 0;
  for (size_t i = 0; i < labels.size(); ++i) hit += (pred[i] == labels[i]);
  return labels.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(labels.size());
}

void Sgd::step(const std::vector<Mat*>& params, const std::vector<Mat>& grads) {
  if (velocity_.empty()) {
    velocity_.reserve(params.size());
    for (const Mat* p : params) velocity_.push_back(Mat::Zero(p->rows(), p->cols()));
  }
  for (size_t i = 0; i < params.size(); ++i) {
    velocity_[i] = momentum_ * velocity_[i] - lr_ * grads[i];
    *params[i] += velocity_[i];
  }
}

void Adam::step(const std::vector<Mat*>& params, const std::vector<Mat>& grads) {
  if (m_.empty()) {
    for (const Mat* p : params) {
      m_.push_back(Mat::Zero(p->rows(), p->cols()));
      v_.push_back(Mat::Zero(p->rows(), p->cols()));
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, t_);
  const double bc2 = 1.0 - std::pow(beta2_, t_);
  for (size_t i = 0; i < params.size(); ++i) {
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i].cwiseProduct(grads[i]);
    params[i]->array() -=
        lr_ * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + eps_);
  }
}

std::unique_ptr<Optimizer> make_optimizer(const std::string& name, double lr) {
  if (name == "adam") return std::make_unique<Adam>(lr);
  if (name == "sgd") return std::make_unique<Sgd>(lr);
  throw InvalidArgument("unknown optimizer '" + name + "'");
}

uint64_t forward_image_count() { return g_forward_images.load(); }
void reset_forward_image_count() { g_forward_images.store(0); }

}  // namespace ulp::nn
