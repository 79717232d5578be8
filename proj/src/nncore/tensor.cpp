#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <unordered_map>

#include "pdr/nn.hpp"

namespace pdr::nn {

std::string Shape::str() const {
  return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
         std::to_string(w) + ")";
}

std::vector<double>& Node::grad_buffer() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad;
}

Tensor Tensor::zeros(Shape s, bool requires_grad) { return full(s, 0.0, requires_grad); }

Tensor Tensor::full(Shape s, double v, bool requires_grad) {
  return from(s, std::vector<double>(s.size(), v), requires_grad);
}

Tensor Tensor::from(Shape s, std::vector<double> values, bool requires_grad) {
  if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0) throw NnError("negative shape " + s.str());
  if (values.size() != s.size()) throw NnError("value count does not match shape " + s.str());
  auto node = std::make_shared<Node>();
  node->shape = s;
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

double Tensor::item() const {
  if (size() != 1) throw NnError("item() on non-scalar tensor " + shape().str());
  return node_->value[0];
}

Tensor make_op(Shape shape, std::vector<double> value, std::vector<Tensor> parents,
               std::function<void(Node&)> backward) {
#ifndef NDEBUG
  for (double v : value)
    if (!std::isfinite(v)) throw NnError("non-finite value produced by op");
#endif
  auto node = std::make_shared<Node>();
  node->shape = shape;
  node->value = std::move(value);
  for (const auto& p : parents) node->requires_grad = node->requires_grad || p.requires_grad();
  if (node->requires_grad) {
    for (auto& p : parents) node->parents.push_back(p.ptr());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw NnError("backward on undefined tensor");
  if (loss.size() != 1) throw NnError("backward needs a scalar loss, got " + loss.shape().str());
  if (!loss.requires_grad()) throw NnError("loss has no recorded computation");

  // Iterative post-order DFS; a node seen again while on the stack is a cycle.
  std::vector<Node*> order;
  std::unordered_map<Node*, int> state;  // 1 = on stack, 2 = done
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node(), 0}};
  state[loss.node()] = 1;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (!p->requires_grad) continue;
      const int s = state[p];
      if (s == 1) throw NnError("cycle in computation graph");
      if (s == 0) {
        state[p] = 1;
        stack.push_back({p, 0});
      }
    } else {
      state[node] = 2;
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->backward) continue;  // leaf
    if (n->grad.empty()) continue;  // nothing flowed here
    n->backward(*n);
  }
}

namespace {

thread_local bool t_tracing = false;
thread_local std::uint64_t t_branches = 0;

struct BranchTrace {
  BranchTrace() {
    t_tracing = true;
    t_branches = 0xcbf29ce484222325ull;
  }
  ~BranchTrace() { t_tracing = false; }
  std::uint64_t signature() const { return t_branches; }
};

}  // namespace

void trace_branch(bool taken) {
  if (t_tracing) t_branches = (t_branches ^ (taken ? 1u : 2u)) * 0x100000001b3ull;
}

void trace_branches(const double* v, std::size_t n, double at) {
  if (!t_tracing) return;
  for (std::size_t i = 0; i < n; ++i) trace_branch(v[i] > at);
}

double grad_check(const std::function<Tensor()>& fn, const std::vector<Tensor>& inputs, double h,
                  std::size_t samples, std::uint64_t seed, GradCheckStats* stats) {
  for (const auto& t : inputs) {
    if (!t.requires_grad()) throw NnError("grad_check input does not require grad");
    t.node()->grad.clear();
  }
  auto eval = [&](std::uint64_t& sig) {
    BranchTrace trace;
    const double v = fn().item();
    sig = trace.signature();
    return v;
  };
  std::uint64_t sig0 = 0, sig_again = 0;
  const double f0 = eval(sig0);
  if (eval(sig_again) != f0 || sig_again != sig0) throw NnError("grad_check: function is not deterministic");
  const Tensor base = fn();
  backward(base);

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t i = 0; i < inputs.size(); ++i)
    for (std::size_t j = 0; j < inputs[i].size(); ++j) coords.push_back({i, j});
  const std::size_t want = std::max<std::size_t>(samples, 200);
  if (coords.size() > want) {
    std::mt19937_64 rng(seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(want);
  }

  GradCheckStats st;
  double worst = 0.0;
  for (auto [i, j] : coords) {
    Tensor t = inputs[i];
    const double analytic = t.grad().empty() ? 0.0 : t.grad()[j];
    const double orig = t.data()[j];
    double step = h, fp = 0.0, fm = 0.0;
    bool smooth = false;
    for (const double s : {h, h / 10.0}) {
      step = s;
      std::uint64_t sp = 0, sm = 0;
      t.data()[j] = orig + step;
      fp = eval(sp);
      t.data()[j] = orig - step;
      fm = eval(sm);
      t.data()[j] = orig;
      smooth = sp == sig0 && sm == sig0;
      if (smooth) break;
    }
    if (!smooth) {
      ++st.skipped;
      continue;
    }
    if (step != h) ++st.refined;
    ++st.checked;
    const double numeric = (fp - fm) / (2.0 * step);
    const double ulp = std::nextafter(std::fabs(f0), INFINITY) - std::fabs(f0);
    const double floor = std::max(kGradCheckFloor, kGradCheckUlps * ulp / (2.0 * step));
    const double denom = std::max({std::fabs(analytic), std::fabs(numeric), floor});
    worst = std::max(worst, std::fabs(analytic - numeric) / denom);
  }
  if (stats) *stats = st;
  return worst;
}

// ---- ParamStore --------------------------------------------------------------

Tensor& ParamStore::add(const std::string& name, Shape shape, bool trainable) {
  if (index_.count(name)) throw NnError("duplicate parameter name: " + name);
  index_[name] = params_.size();
  params_.push_back({name, Tensor::zeros(shape, trainable), trainable});
  return params_.back().tensor;
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw NnError("unknown parameter: " + name);
  return params_[it->second].tensor;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw NnError("unknown parameter: " + name);
  return params_[it->second].tensor;
}

std::size_t ParamStore::trainable_count() const {
  std::size_t n = 0;
  for (const auto& p : params_)
    if (p.trainable) n += p.tensor.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p.tensor.grad().clear();
}

namespace {

constexpr char kMagic[4] = {'P', 'D', 'R', 'W'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw NnError("truncated weight file");
  return v;
}

}  // namespace

void ParamStore::save(std::ostream& os) const {
  os.write(kMagic, 4);
  put<std::uint32_t>(os, kVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(params_.size()));
  for (const auto& p : params_) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put<std::uint32_t>(os, 4);
    const Shape& s = p.tensor.shape();
    for (int d : {s.n, s.c, s.h, s.w}) put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    os.write(reinterpret_cast<const char*>(p.tensor.data().data()),
             static_cast<std::streamsize>(p.tensor.size() * sizeof(double)));
  }
  if (!os) throw NnError("failed writing weights");
}

void ParamStore::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw NnError("cannot open " + path);
  save(os);
}

void ParamStore::load(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw NnError("not a PDRW file");
  if (take<std::uint32_t>(is) != kVersion) throw NnError("unsupported PDRW version");
  const auto count = take<std::uint32_t>(is);
  if (count != params_.size())
    throw NnError("weight file has " + std::to_string(count) + " entries, model has " +
                  std::to_string(params_.size()));
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto len = take<std::uint32_t>(is);
    if (len > 4096) throw NnError("corrupt parameter name");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw NnError("truncated weight file");
    const auto rank = take<std::uint32_t>(is);
    if (rank != 4) throw NnError("unsupported rank for " + name);
    Shape s;
    s.n = static_cast<int>(take<std::uint32_t>(is));
    s.c = static_cast<int>(take<std::uint32_t>(is));
    s.h = static_cast<int>(take<std::uint32_t>(is));
    s.w = static_cast<int>(take<std::uint32_t>(is));
    Tensor& t = get(name);
    if (!(t.shape() == s)) throw NnError("shape mismatch for " + name + ": " + s.str());
    if (!is.read(reinterpret_cast<char*>(t.data().data()),
                 static_cast<std::streamsize>(t.size() * sizeof(double))))
      throw NnError("truncated weight file");
  }
}

void ParamStore::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw NnError("cannot open " + path);
  load(is);
}

void Sgd::step(ParamStore& store) {
  for (auto& p : store.params()) {
    if (!p.trainable) continue;
    auto& g = p.tensor.grad();
    if (g.empty()) throw NnError("missing gradient for " + p.name);
    auto& v = velocity_[p.name];
    if (v.empty()) v.assign(g.size(), 0.0);
    auto& w = p.tensor.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = momentum_ * v[i] + g[i];
      w[i] -= lr_ * v[i];
    }
  }
}

}  // namespace pdr::nn
