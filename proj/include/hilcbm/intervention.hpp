#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "hilcbm/error.hpp"
#include "hilcbm/explain.hpp"
#include "hilcbm/model.hpp"
#include "hilcbm/text.hpp"

namespace hilcbm {

struct ConceptOverride {
  Level level = Level::low;
  std::size_t concept_id = 0;
  double value = 0.0;  ///< standardized activation
};

/// Everything a session has changed relative to the base model.
struct Overlay {
  std::map<std::tuple<Level, std::size_t, std::size_t>, double> weight_edits;  ///< (level, class, concept) -> value
  std::optional<std::size_t> mask_high;
  std::map<std::pair<Level, std::size_t>, double> overrides;  ///< (level, concept) -> value

  bool empty() const { return weight_edits.empty() && !mask_high && overrides.empty(); }
  friend bool operator==(const Overlay&, const Overlay&) = default;
};

struct SessionState {
  Overlay overlay;
  std::vector<std::string> log;

  friend bool operator==(const SessionState&, const SessionState&) = default;
};

/// Copy-on-write debugging view over an immutable model. Mutations are
/// single-writer: a second concurrent writer gets a conflict error rather
/// than waiting. Readers always see a state between whole operations.
class Session {
 public:
  Session(std::string id, std::shared_ptr<const HilModel> base) : id_(std::move(id)), base_(std::move(base)) {
    require(base_ != nullptr, ErrorKind::invalid_argument, "session needs a model");
    require_complete(*base_);
  }

  const std::string& id() const { return id_; }
  const HilModel& base() const { return *base_; }

  void edit_weight(Level level, std::size_t class_id, std::size_t concept_id, double value) {
    check_weight_ids(level, class_id, concept_id);
    require(std::isfinite(value), ErrorKind::non_finite, "weight value must be finite");
    mutate([&](SessionState& s) {
      s.overlay.weight_edits[{level, class_id, concept_id}] = value;
      s.log.push_back("EDIT " + std::string(to_string(level)) + " " + std::to_string(class_id) + " " +
                      std::to_string(concept_id) + " " + text::format_double(value));
    });
  }

  void mask_to_high_class(std::size_t high_id) {
    require(high_id < base_->taxonomy.high_count(), ErrorKind::out_of_range,
            "high class " + std::to_string(high_id) + " out of range");
    mutate([&](SessionState& s) {
      s.overlay.mask_high = high_id;
      s.log.push_back("MASK " + std::to_string(high_id));
    });
  }

  void override_concepts(const std::vector<ConceptOverride>& overrides) {
    for (const auto& o : overrides) {
      require(o.concept_id < base_->concept_count(o.level), ErrorKind::out_of_range,
              std::string(to_string(o.level)) + " concept " + std::to_string(o.concept_id) + " out of range");
      require(std::isfinite(o.value), ErrorKind::non_finite, "override value must be finite");
    }
    if (overrides.empty()) return;
    mutate([&](SessionState& s) {
      for (const auto& o : overrides) {
        s.overlay.overrides[{o.level, o.concept_id}] = o.value;
        s.log.push_back("OVERRIDE " + std::string(to_string(o.level)) + " " + std::to_string(o.concept_id) + " " +
                        text::format_double(o.value));
      }
    });
  }

  /// Drops every edit, mask and override. The log records the RESET.
  void reset() {
    mutate([](SessionState& s) {
      s.overlay = Overlay{};
      s.log.push_back("RESET");
    });
  }

  /// Applies one edit-log line.
  void apply(const std::string& line) {
    const auto f = text::split_ws(line);
    require(!f.empty(), ErrorKind::format, "empty edit-log line");
    auto arity = [&](std::size_t n) {
      require(f.size() == n, ErrorKind::format, "malformed edit-log line '" + line + "'");
    };
    if (f[0] == "EDIT") {
      arity(5);
      edit_weight(parse_level(f[1]), text::parse_int<std::size_t>(f[2], "class"),
                  text::parse_int<std::size_t>(f[3], "concept"), text::parse_double(f[4], "value"));
    } else if (f[0] == "MASK") {
      arity(2);
      mask_to_high_class(text::parse_int<std::size_t>(f[1], "high class"));
    } else if (f[0] == "OVERRIDE") {
      arity(4);
      override_concepts({{parse_level(f[1]), text::parse_int<std::size_t>(f[2], "concept"), text::parse_double(f[3], "value")}});
    } else if (f[0] == "RESET") {
      arity(1);
      reset();
    } else {
      fail(ErrorKind::format, "unknown edit-log operation '" + f[0] + "'");
    }
  }

  static std::unique_ptr<Session> replay(std::string id, std::shared_ptr<const HilModel> base,
                                         const std::vector<std::string>& log) {
    auto s = std::make_unique<Session>(std::move(id), std::move(base));
    for (const auto& line : log) s->apply(line);
    return s;
  }

  /// Holds the writer slot; every mutation fails with a conflict until the
  /// returned lock is released.
  std::unique_lock<std::mutex> hold_writer() {
    std::unique_lock writer(writer_mutex_, std::try_to_lock);
    require(writer.owns_lock(), ErrorKind::conflict, "session " + id_ + " is being modified; retry");
    return writer;
  }

  SessionState state() const {
    std::shared_lock lock(state_mutex_);
    return state_;
  }

  std::vector<std::string> log() const { return state().log; }

  /// The session's effective head for one level: base weights plus edits.
  SparseHead head(Level level) const { return effective_head(state(), level); }

  HierPrediction predict(const Tensor& sample) const {
    const SessionState s = state();
    return predict_with(effective_head(s, Level::low), effective_head(s, Level::high), inputs(s, sample), base_->taxonomy,
                        s.overlay.mask_high);
  }

  HierExplanation repredict(const Tensor& sample, const ExplainRequest& req = {}) const {
    const SessionState s = state();
    return explain_with(effective_head(s, Level::low), effective_head(s, Level::high), inputs(s, sample), *base_, req,
                        s.overlay.mask_high);
  }

 private:
  void check_weight_ids(Level level, std::size_t class_id, std::size_t concept_id) const {
    const auto& h = base_->head(level);
    require(class_id < h.classes(), ErrorKind::out_of_range,
            std::string(to_string(level)) + " class " + std::to_string(class_id) + " out of range");
    require(concept_id < h.concepts(), ErrorKind::out_of_range,
            std::string(to_string(level)) + " concept " + std::to_string(concept_id) + " out of range");
  }

  template <class F>
  void mutate(F&& f) {
    std::unique_lock writer(writer_mutex_, std::try_to_lock);
    require(writer.owns_lock(), ErrorKind::conflict, "session " + id_ + " is being modified; retry");
    SessionState next = state();
    f(next);
    std::unique_lock lock(state_mutex_);
    state_ = std::move(next);
  }

  SparseHead effective_head(const SessionState& s, Level level) const {
    SparseHead h = base_->head(level);
    for (const auto& [key, value] : s.overlay.weight_edits) {
      const auto& [lv, cls, concept_id] = key;
      if (lv == level) h.weight(cls, concept_id) = value;
    }
    return h;
  }

  ConceptVector inputs(const SessionState& s, const Tensor& sample) const {
    ConceptVector cv = concept_vector(*base_, sample);
    for (const auto& [key, value] : s.overlay.overrides) cv.standardized(key.first)[key.second] = value;
    return cv;
  }

  std::string id_;
  std::shared_ptr<const HilModel> base_;
  std::mutex writer_mutex_;
  mutable std::shared_mutex state_mutex_;
  SessionState state_;
};

/// Owns live sessions and expires those idle longer than the TTL.
class SessionRegistry {
 public:
  using Clock = std::function<std::chrono::steady_clock::time_point()>;

  explicit SessionRegistry(std::shared_ptr<const HilModel> model,
                           std::chrono::seconds ttl = std::chrono::minutes(30),
                           Clock clock = [] { return std::chrono::steady_clock::now(); })
      : model_(std::move(model)), ttl_(ttl), clock_(std::move(clock)) {}

  std::shared_ptr<Session> create() {
    std::lock_guard lock(mutex_);
    expire_locked();
    char buf[32];
    std::snprintf(buf, sizeof buf, "s%06llu", static_cast<unsigned long long>(++counter_));
    auto s = std::make_shared<Session>(buf, model_);
    sessions_[s->id()] = Entry{s, clock_()};
    return s;
  }

  /// Looks a session up and refreshes its idle timer; expired ids are not found.
  std::shared_ptr<Session> get(const std::string& id) {
    std::lock_guard lock(mutex_);
    expire_locked();
    auto it = sessions_.find(id);
    require(it != sessions_.end(), ErrorKind::not_found, "no session '" + id + "' (unknown or expired)");
    it->second.last_used = clock_();
    return it->second.session;
  }

  std::size_t size() {
    std::lock_guard lock(mutex_);
    expire_locked();
    return sessions_.size();
  }

  std::chrono::seconds ttl() const { return ttl_; }

 private:
  struct Entry {
    std::shared_ptr<Session> session;
    std::chrono::steady_clock::time_point last_used;
  };

  void expire_locked() {
    const auto now = clock_();
    for (auto it = sessions_.begin(); it != sessions_.end();)
      it = now - it->second.last_used > ttl_ ? sessions_.erase(it) : std::next(it);
  }

  std::shared_ptr<const HilModel> model_;
  std::chrono::seconds ttl_;
  Clock clock_;
  std::mutex mutex_;
  std::map<std::string, Entry> sessions_;
  std::uint64_t counter_ = 0;
};

}  // namespace hilcbm
