#pragma once

// Training loop, validation and checkpoints.
//
// Checkpoint layout (little-endian):
//   "NERDCKPT"  u32 version  u64 model digest
//   u32 length + canonical run configuration text
//   u64 optimizer step  u32 record count
//   records: u32 name length, name, u32 rank, u64 extents..., f32 values
//            (parameters in declaration order, then adam.m.*, then adam.v.*)
//   u64 FNV-1a of every preceding byte

#include <bit>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <ostream>

#include "nerd/config.hpp"
#include "nerd/data.hpp"
#include "nerd/losses.hpp"
#include "nerd/metrics.hpp"
#include "nerd/model.hpp"
#include "nerd/optim.hpp"

namespace nerd {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'N', 'E', 'R', 'D', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointRecord {
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  RunConfig config;
  std::uint64_t digest = 0;
  std::uint64_t step = 0;
  std::vector<std::string> order;
  std::map<std::string, CheckpointRecord> records;
};

namespace detail {

class ByteWriter {
 public:
  template <typename U>
  void put(U v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(U));
  }
  void put_bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void put_string(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    put_bytes(s.data(), s.size());
  }
  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(const std::string& b, std::string path) : buf_(b), path_(std::move(path)) {}
  template <typename U>
  U get() {
    U v;
    need(sizeof(U));
    std::memcpy(&v, buf_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void get_bytes(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n) throw IoError("truncated checkpoint " + path_);
  }
  const std::string& buf_;
  std::string path_;
  std::size_t pos_ = 0;
};

inline void write_file_atomic(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + tmp);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    f.flush();
    if (!f) {
      std::remove(tmp.c_str());
      throw IoError("cannot write " + tmp);
    }
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    std::remove(tmp.c_str());
    throw IoError("cannot write " + path + ": " + ec.message());
  }
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path);
  return std::string(std::istreambuf_iterator<char>(f), {});
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  detail::ByteWriter w;
  w.put_bytes(kCheckpointMagic, 8);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint64_t>(ck.digest);
  w.put_string(canonical_text(ck.config));
  w.put<std::uint64_t>(ck.step);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ck.order.size()));
  for (const auto& name : ck.order) {
    const auto& r = ck.records.at(name);
    w.put_string(name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(r.shape.size()));
    for (auto d : r.shape) w.put<std::uint64_t>(d);
    w.put_bytes(r.values.data(), r.values.size() * sizeof(float));
  }
  w.put<std::uint64_t>(fnv1a(w.bytes()));
  detail::write_file_atomic(path, w.bytes());
}

inline Checkpoint load_checkpoint(const std::string& path) {
  const std::string bytes = detail::read_file(path);
  if (bytes.size() < 8 + 4 + 8 + 8 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw IoError("not a checkpoint: " + path);
  std::uint64_t trailer;
  std::memcpy(&trailer, bytes.data() + bytes.size() - 8, 8);
  if (trailer != fnv1a(std::string_view(bytes).substr(0, bytes.size() - 8)))
    throw IoError("checkpoint checksum mismatch: " + path);
  detail::ByteReader r(bytes, path);
  char magic[8];
  r.get_bytes(magic, 8);
  if (const auto v = r.get<std::uint32_t>(); v != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(v) + ": " + path);
  Checkpoint ck;
  ck.digest = r.get<std::uint64_t>();
  try {
    ck.config = parse_config(r.get_string());
  } catch (const ConfigError& e) {
    throw IoError("corrupt configuration in checkpoint " + path + ": " + e.what());
  }
  if (model_digest(ck.config.model) != ck.digest) throw IoError("checkpoint digest does not match its configuration");
  ck.step = r.get<std::uint64_t>();
  const auto n = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) {
    auto name = r.get_string();
    CheckpointRecord rec;
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw IoError("corrupt record " + name + " in " + path);
    for (std::uint32_t k = 0; k < rank; ++k) rec.shape.push_back(r.get<std::uint64_t>());
    const std::size_t count = numel_of(rec.shape);
    if (count > bytes.size()) throw IoError("corrupt record " + name + " in " + path);
    rec.values.resize(count);
    r.get_bytes(rec.values.data(), count * sizeof(float));
    ck.order.push_back(name);
    if (!ck.records.emplace(name, std::move(rec)).second) throw IoError("duplicate record " + name + " in " + path);
  }
  if (r.pos() != bytes.size() - 8) throw IoError("trailing bytes in checkpoint " + path);
  return ck;
}

/// Copies the named parameters of a checkpoint into a model's store.
inline void restore_parameters(ParamStore<float>& store, const Checkpoint& ck) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& spec = store.specs()[i];
    auto it = ck.records.find(spec.name);
    if (it == ck.records.end()) throw IoError("checkpoint lacks parameter " + spec.name);
    if (it->second.shape != spec.shape)
      throw IoError("checkpoint shape mismatch for " + spec.name + ": " + to_string(it->second.shape));
    auto dst = store.tensors()[i].data_mut();
    std::copy(it->second.values.begin(), it->second.values.end(), dst.begin());
  }
}

/// Rebuilds the model stored in a checkpoint.
inline NerdRain<float> model_from_checkpoint(const Checkpoint& ck) {
  NerdRain<float> m(ck.config.model, ck.config.train.seed);
  restore_parameters(m.params(), ck);
  return m;
}

/// Restored full-resolution output, no graph.
inline Image derain(const NerdRain<float>& model, const Image& rainy) {
  NoGradGuard ng;
  return model.forward(rainy).restored();
}

inline std::vector<MetricRow> evaluate(const NerdRain<float>& model, const std::vector<NamedPair>& pairs) {
  std::vector<MetricRow> rows;
  for (const auto& p : pairs) {
    auto out = derain(model, p.pair.rainy);
    rows.push_back({p.name, psnr(out, p.pair.clean), ssim(out, p.pair.clean)});
  }
  return rows;
}

inline std::pair<double, double> mean_metrics(const std::vector<MetricRow>& rows) {
  double p = 0, s = 0;
  for (const auto& r : rows) p += r.psnr, s += r.ssim;
  const double n = rows.empty() ? 1.0 : static_cast<double>(rows.size());
  return {p / n, s / n};
}

struct EpochLog {
  std::size_t epoch = 0;
  double charb = 0, freq = 0, edge = 0, inr = 0, total = 0;
  double val_psnr = std::numeric_limits<double>::quiet_NaN();
  double val_ssim = std::numeric_limits<double>::quiet_NaN();
};

inline const char* kLogHeader = "epoch\tloss_char\tloss_freq\tloss_edge\tloss_inr\tloss_total\tval_psnr\tval_ssim\n";

inline std::string format_log_row(const EpochLog& e) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu\t%.8g\t%.8g\t%.8g\t%.8g\t%.8g\t%.6f\t%.6f\n", e.epoch, e.charb, e.freq, e.edge,
                e.inr, e.total, e.val_psnr, e.val_ssim);
  return buf;
}

class Trainer {
 public:
  Trainer(RunConfig rc, std::vector<NamedPair> train, std::vector<NamedPair> val = {})
      : rc_(std::move(rc)),
        train_(std::move(train)),
        val_(std::move(val)),
        model_(rc_.model, rc_.train.seed),
        adam_(model_.params().tensors(), {rc_.train.beta1, rc_.train.beta2, rc_.train.eps_adam}) {
    rc_.train.validate();
    if (train_.empty()) throw ConfigError("training set is empty");
  }

  const RunConfig& config() const { return rc_; }
  NerdRain<float>& model() { return model_; }
  const NerdRain<float>& model() const { return model_; }
  Adam<float>& optimizer() { return adam_; }
  std::size_t step() const { return step_; }

  std::size_t steps_per_epoch() const {
    return rc_.train.steps_per_epoch ? rc_.train.steps_per_epoch : train_.size();
  }
  std::size_t total_steps() const { return rc_.train.epochs * steps_per_epoch(); }

  /// Batch for a given step; a function of (seed, step) only.
  ImagePair batch(std::size_t step) const {
    Rng rng(mix64(rc_.train.seed ^ mix64(step + 1)));
    std::vector<Image> rainy, clean;
    for (std::size_t b = 0; b < rc_.train.batch; ++b) {
      const auto& src = train_[rng.below(train_.size())].pair;
      const auto patch_seed = rng.next(), flip_seed = rng.next();
      ImagePair p = rc_.train.patch ? random_patch(src, rc_.train.patch, patch_seed).pair : src;
      p = augment(p, flip_seed);
      rainy.push_back(p.rainy);
      clean.push_back(p.clean);
    }
    if (rainy.size() == 1) return {rainy[0], clean[0]};
    return {ops::concat(rainy, 0), ops::concat(clean, 0)};
  }

  /// One optimizer step. Throws NumericError on a non-finite loss or
  /// gradient, leaving parameters and moments unchanged.
  LossBreakdown<float>::Values train_step() {
    if (step_ >= total_steps()) throw std::logic_error("train_step: schedule already complete");
    auto b = batch(step_);
    auto out = model_.forward(b.rainy);
    auto loss = total_loss(out, b.clean, rc_.train.loss, rc_.model.use_inr);
    const auto v = loss.values();
    if (!std::isfinite(v.total))
      throw NumericError("non-finite loss at step " + std::to_string(step_) + " (char " + std::to_string(v.charb) +
                         ", freq " + std::to_string(v.freq) + ", edge " + std::to_string(v.edge) + ", inr " +
                         std::to_string(v.inr) + ")");
    model_.params().zero_grad();
    loss.total.backward();
    auto& params = model_.params().tensors();
    clip_grad_norm(params, rc_.train.clip);
    const double lr = cosine_lr(step_, total_steps(), rc_.train.lr0, rc_.train.lr_min);
    if (!adam_.step(lr)) throw NumericError("non-finite gradient at step " + std::to_string(step_));
    model_.params().zero_grad();
    ++step_;
    return v;
  }

  Checkpoint checkpoint() const {
    Checkpoint ck;
    ck.config = rc_;
    ck.digest = model_digest(rc_.model);
    ck.step = step_;
    const auto& store = model_.params();
    const auto& m = adam_.first_moments();
    const auto& v = adam_.second_moments();
    for (std::size_t i = 0; i < store.size(); ++i) {
      const auto& s = store.specs()[i];
      const auto d = store.tensors()[i].data();
      ck.order.push_back(s.name);
      ck.records[s.name] = {s.shape, std::vector<float>(d.begin(), d.end())};
    }
    for (std::size_t i = 0; i < store.size(); ++i) {
      const auto& s = store.specs()[i];
      ck.order.push_back("adam.m." + s.name);
      ck.records["adam.m." + s.name] = {s.shape, m[i]};
    }
    for (std::size_t i = 0; i < store.size(); ++i) {
      const auto& s = store.specs()[i];
      ck.order.push_back("adam.v." + s.name);
      ck.records["adam.v." + s.name] = {s.shape, v[i]};
    }
    return ck;
  }

  /// Restores parameters, moments and the step counter.
  void resume(const Checkpoint& ck) {
    if (ck.digest != model_digest(rc_.model)) throw ConfigError("checkpoint was written for a different model");
    restore_parameters(model_.params(), ck);
    const auto& store = model_.params();
    for (std::size_t i = 0; i < store.size(); ++i) {
      const auto& name = store.specs()[i].name;
      auto mi = ck.records.find("adam.m." + name), vi = ck.records.find("adam.v." + name);
      if (mi == ck.records.end() || vi == ck.records.end()) throw IoError("checkpoint lacks optimizer state for " + name);
      if (mi->second.values.size() != adam_.first_moments()[i].size() ||
          vi->second.values.size() != adam_.second_moments()[i].size())
        throw IoError("optimizer state size mismatch for " + name);
      adam_.first_moments()[i] = mi->second.values;
      adam_.second_moments()[i] = vi->second.values;
    }
    adam_.set_steps(ck.step);
    step_ = ck.step;
  }

  /// Trains to the end of the schedule (or until max_steps more steps),
  /// writing last.ckpt, best.ckpt and log.tsv under out_dir when non-empty.
  /// Returns the epoch rows completed during this call.
  std::vector<EpochLog> run(const fs::path& out_dir = {}, std::size_t max_steps = 0,
                            const std::function<void(const EpochLog&)>& on_epoch = {}) {
    std::vector<EpochLog> logs;
    const std::size_t spe = steps_per_epoch();
    const std::size_t stop = max_steps ? std::min(total_steps(), step_ + max_steps) : total_steps();
    std::ofstream log;
    if (!out_dir.empty()) {
      std::error_code ec;
      fs::create_directories(out_dir, ec);
      const auto lp = out_dir / "log.tsv";
      const bool fresh = step_ == 0 || !fs::exists(lp);
      log.open(lp, fresh ? std::ios::trunc : std::ios::app);
      if (!log) throw IoError("cannot write " + lp.string());
      if (fresh) log << kLogHeader;
    }
    EpochLog acc;
    std::size_t in_epoch = 0;
    while (step_ < stop) {
      const auto v = train_step();
      acc.charb += v.charb, acc.freq += v.freq, acc.edge += v.edge, acc.inr += v.inr, acc.total += v.total;
      ++in_epoch;
      if (step_ % spe != 0) continue;
      const double n = static_cast<double>(in_epoch);
      acc.charb /= n, acc.freq /= n, acc.edge /= n, acc.inr /= n, acc.total /= n;
      acc.epoch = step_ / spe;
      if (!val_.empty() && (acc.epoch % rc_.train.val_every == 0 || step_ == total_steps())) {
        std::tie(acc.val_psnr, acc.val_ssim) = mean_metrics(evaluate(model_, val_));
      }
      if (!out_dir.empty()) {
        log << format_log_row(acc);
        log.flush();
        const auto ck = checkpoint();
        save_checkpoint((out_dir / "last.ckpt").string(), ck);
        if (std::isfinite(acc.val_psnr) && acc.val_psnr > best_psnr_) {
          best_psnr_ = acc.val_psnr;
          save_checkpoint((out_dir / "best.ckpt").string(), ck);
        }
      }
      if (on_epoch) on_epoch(acc);
      logs.push_back(acc);
      acc = EpochLog{};
      in_epoch = 0;
    }
    if (!out_dir.empty() && in_epoch) save_checkpoint((out_dir / "last.ckpt").string(), checkpoint());
    return logs;
  }

 private:
  RunConfig rc_;
  std::vector<NamedPair> train_, val_;
  NerdRain<float> model_;
  Adam<float> adam_;
  std::size_t step_ = 0;
  double best_psnr_ = -std::numeric_limits<double>::infinity();
};

}  // namespace nerd
