#pragma once

#include <algorithm>
#include <chrono>
#include <cstddef>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "hilcbm/dataset.hpp"
#include "hilcbm/error.hpp"
#include "hilcbm/explain.hpp"
#include "hilcbm/intervention.hpp"
#include "hilcbm/model.hpp"
#include "hilcbm/text.hpp"

namespace hilcbm {

using json = nlohmann::json;

inline constexpr int kSchemaVersion = 1;

struct Response {
  int status = 200;
  json body;
};

namespace api {

inline json to_json(const ClassScore& c) { return {{"id", c.id}, {"name", c.name}, {"probability", c.probability}}; }

inline json to_json(const HierPrediction& p) {
  return {{"high", to_json(p.high)},
          {"low", to_json(p.low)},
          {"logits", {{"high", p.logits_high}, {"low", p.logits_low}}},
          {"probabilities", {{"high", p.probs_high}, {"low", p.probs_low}}},
          {"consistent", p.consistent},
          {"mask_high", p.mask_high ? json(*p.mask_high) : json(nullptr)}};
}

inline json to_json(const Contribution& c) {
  return {{"concept_id", c.concept_id}, {"concept", c.name},     {"activation", c.activation},
          {"standardized", c.standardized}, {"weight", c.weight}, {"contribution", c.contribution}};
}

inline json to_json(const LevelExplanation& e) {
  json top = json::array();
  for (const auto& c : e.top) top.push_back(to_json(c));
  return {{"level", to_string(e.level)}, {"class_id", e.class_id},       {"class_name", e.class_name},
          {"probability", e.probability}, {"logit", e.logit},           {"bias", e.bias},
          {"residual", e.residual},      {"nonzero_terms", e.all.size()}, {"contributions", top}};
}

inline json to_json(const HierExplanation& ex) {
  return {{"prediction", to_json(ex.prediction)},
          {"high", to_json(ex.high)},
          {"low", to_json(ex.low)},
          {"text", render_explanation(ex)}};
}

inline json hyper_json(const Hyperparameters& h) {
  return {{"lambda", h.lambda},       {"alpha", h.alpha}, {"lambda_vis", h.lambda_vis},
          {"lambda_semantic", h.lambda_semantic}, {"seed", h.seed}, {"visual_variant", to_string(h.visual_variant)}};
}

inline int status_of(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::not_found:
    case ErrorKind::incomplete_model: return 404;
    case ErrorKind::conflict: return 409;
    case ErrorKind::invalid_argument:
    case ErrorKind::shape_mismatch:
    case ErrorKind::size_mismatch:
    case ErrorKind::out_of_range:
    case ErrorKind::format:
    case ErrorKind::non_finite: return 400;
    default: return 500;
  }
}

inline std::string_view code_of(int status) {
  switch (status) {
    case 400: return "bad_request";
    case 404: return "not_found";
    case 409: return "conflict";
    default: return "internal";
  }
}

inline Response error_response(int status, const std::string& message, const std::string& detail = {}) {
  return {status, {{"schema_version", kSchemaVersion},
                   {"error", {{"code", code_of(status)}, {"message", message}, {"detail", detail}}}}};
}

inline void reject_unknown(const json& body, std::initializer_list<std::string_view> allowed) {
  require(body.is_object(), ErrorKind::invalid_argument, "request body must be a JSON object");
  for (const auto& [key, _] : body.items()) {
    bool ok = false;
    for (auto a : allowed) ok = ok || key == a;
    require(ok, ErrorKind::invalid_argument, "unknown field '" + key + "'");
  }
}

template <class T>
T field(const json& body, const char* name) {
  require(body.contains(name), ErrorKind::invalid_argument, std::string("missing field '") + name + "'");
  try {
    return body.at(name).get<T>();
  } catch (const json::exception&) {
    fail(ErrorKind::invalid_argument, std::string("field '") + name + "' has the wrong type");
  }
}

inline std::size_t index_field(const json& body, const char* name) {
  const json& v = body.contains(name) ? body.at(name) : json();
  require(v.is_number_integer() && v.get<long long>() >= 0, ErrorKind::invalid_argument,
          std::string("field '") + name + "' must be a non-negative integer");
  return v.get<std::size_t>();
}

inline std::map<std::string, std::string> parse_query(std::string_view q) {
  std::map<std::string, std::string> out;
  for (const auto& part : text::split(q, '&')) {
    if (part.empty()) continue;
    const auto eq = part.find('=');
    out[httplib::detail::decode_url(part.substr(0, eq), true)] =
        eq == std::string::npos ? "" : httplib::detail::decode_url(part.substr(eq + 1), true);
  }
  return out;
}

}  // namespace api

/// Request routing over one immutable model and an optional sample bundle.
/// handle() is transport-free; serve() binds it to HTTP.
class Service {
 public:
  Service(std::shared_ptr<const HilModel> model, std::optional<DatasetBundle> bundle = std::nullopt,
          std::chrono::seconds session_ttl = std::chrono::minutes(30),
          SessionRegistry::Clock clock = [] { return std::chrono::steady_clock::now(); })
      : model_(std::move(model)), bundle_(std::move(bundle)), sessions_(model_, session_ttl, std::move(clock)) {
    if (model_ && bundle_) {
      const auto& f = bundle_->features;
      require(f.dim(f.rank() - 1) == model_->layers.w_low.dim(1), ErrorKind::shape_mismatch,
              "bundle feature width does not match the model");
    }
  }

  Response handle(std::string_view method, std::string_view target, std::string_view body_text = {}) {
    const auto q = target.find('?');
    const std::string path(target.substr(0, q));
    const auto query = q == std::string_view::npos ? std::map<std::string, std::string>{} : api::parse_query(target.substr(q + 1));
    try {
      json body = json::object();
      if (!text::trim(body_text).empty()) {
        try {
          body = json::parse(body_text);
        } catch (const json::parse_error& e) {
          return api::error_response(400, "malformed JSON body", e.what());
        }
      }
      Response r = route(method, path, query, body);
      r.body["schema_version"] = kSchemaVersion;
      return r;
    } catch (const Error& e) {
      return api::error_response(api::status_of(e.kind()), e.message(), std::string(to_string(e.kind())));
    } catch (const std::exception& e) {
      return api::error_response(500, "internal error", e.what());
    }
  }

  /// Blocks serving HTTP until stop() is called from another thread.
  void serve(const std::string& host, int port) {
    bind(host, port);
    listen();
  }

  /// Binds the listening socket and returns its port; port 0 picks a free one.
  int bind(const std::string& host, int port) {
    auto adapt = [this](const httplib::Request& req, httplib::Response& res) {
      std::string target = req.path;
      if (!req.params.empty()) {
        target += '?';
        bool first = true;
        for (const auto& [k, v] : req.params) {
          target += (first ? "" : "&") + k + "=" + httplib::detail::encode_query_param(v);
          first = false;
        }
      }
      const Response r = handle(req.method, target, req.body);
      res.status = r.status;
      res.set_content(r.body.dump(), "application/json");
    };
    server_.Get(R"(/.*)", adapt);
    server_.Post(R"(/.*)", adapt);
    const int bound = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    require(bound > 0, ErrorKind::io, "cannot bind " + host + ":" + std::to_string(port));
    return bound;
  }

  /// Serves on the socket from bind() until stop().
  void listen() { server_.listen_after_bind(); }

  void stop() { server_.stop(); }
  bool running() const { return server_.is_running(); }
  void wait_until_ready() const { server_.wait_until_ready(); }

  SessionRegistry& sessions() { return sessions_; }

 private:
  using Query = std::map<std::string, std::string>;

  const HilModel& model() const {
    require(model_ != nullptr, ErrorKind::not_found, "no model loaded");
    return *model_;
  }

  Response route(std::string_view method, const std::string& path, const Query& query, const json& body) {
    const auto parts = text::split(path, '/');  // "", "v1", ...
    require(parts.size() >= 3 && parts[0].empty() && parts[1] == "v1", ErrorKind::not_found, "no route " + path);
    const std::string& head = parts[2];
    const bool get = method == "GET", post = method == "POST";
    if (parts.size() == 3) {
      if (get && head == "model") return {200, model_summary()};
      if (get && head == "taxonomy") return {200, taxonomy_json()};
      if (get && head == "samples") return {200, samples(query)};
      if (post && head == "predict") return {200, predict(body)};
      if (post && head == "explain") return {200, explain(body)};
      if (post && head == "sessions") {
        api::reject_unknown(body, {});
        model();
        return {201, {{"session_id", sessions_.create()->id()}}};
      }
    }
    if (head == "sessions" && parts.size() == 5) return session_route(method, parts[3], parts[4], body);
    fail(ErrorKind::not_found, "no route " + std::string(method) + " " + path);
  }

  json model_summary() const {
    const HilModel& m = model();
    json out = {{"stage", to_string(m.stage)},
                {"K_L", m.taxonomy.low_count()},
                {"K_H", m.taxonomy.high_count()},
                {"n", m.bank.low.size()},
                {"m", m.bank.high.size()},
                {"feature_dim", m.layers.w_low.dim(1)},
                {"concepts", {{"low", m.bank.low.names}, {"high", m.bank.high.names}}},
                {"hyperparameters", api::hyper_json(m.hyper)},
                {"fingerprint", std::to_string(checkpoint::fingerprint(m))}};
    out["sparsity"] = m.complete() ? json{{"low", m.head_low->sparsity()}, {"high", m.head_high->sparsity()}} : json(nullptr);
    return out;
  }

  json taxonomy_json() const {
    const Taxonomy& t = model().taxonomy;
    return {{"low", t.low_names()}, {"high", t.high_names()}, {"parent", t.parents()}};
  }

  const DatasetBundle& bundle() const {
    require(bundle_.has_value(), ErrorKind::not_found, "no sample bundle loaded");
    return *bundle_;
  }

  json samples(const Query& query) const {
    const DatasetBundle& b = bundle();
    auto number = [&](const char* key, std::size_t fallback) {
      const auto it = query.find(key);
      return it == query.end() ? fallback : text::parse_int<std::size_t>(it->second, key);
    };
    for (const auto& [k, _] : query)
      require(k == "page" || k == "size", ErrorKind::invalid_argument, "unknown query parameter '" + k + "'");
    const std::size_t page = number("page", 0), size = number("size", 50);
    require(size >= 1 && size <= 1000, ErrorKind::invalid_argument, "size must lie in [1,1000]");
    json items = json::array();
    for (std::size_t i = page * size; i < b.size() && i < (page + 1) * size; ++i) {
      json item = {{"index", i}, {"id", b.sample_ids[i]}};
      if (i < b.thumbnails.size() && !b.thumbnails[i].empty()) item["thumbnail"] = b.thumbnails[i];
      items.push_back(item);
    }
    return {{"page", page}, {"size", size}, {"total", b.size()}, {"samples", items}};
  }

  /// A sample named by id or given inline as {"features": [...], "shape": [...]}.
  Tensor resolve_sample(const json& body) const {
    const bool by_id = body.contains("sample_id"), inline_f = body.contains("features");
    require(by_id != inline_f, ErrorKind::invalid_argument, "give exactly one of 'sample_id' or 'features'");
    if (by_id) {
      const auto id = api::field<std::string>(body, "sample_id");
      const auto idx = bundle().find(id);
      require(idx.has_value(), ErrorKind::not_found, "unknown sample '" + id + "'");
      return sample_features(*bundle_, *idx);
    }
    const auto values = api::field<std::vector<double>>(body, "features");
    Shape shape = body.contains("shape") ? api::field<Shape>(body, "shape") : Shape{values.size()};
    require(shape.size() == 1 || shape.size() == 3, ErrorKind::invalid_argument, "inline shape must be [D] or [H,W,D]");
    require(element_count(shape) == values.size(), ErrorKind::shape_mismatch,
            "features hold " + std::to_string(values.size()) + " values for shape " + shape_string(shape));
    Tensor t(shape, values);
    require(t.all_finite(), ErrorKind::non_finite, "inline features contain non-finite values");
    return t;
  }

  ExplainRequest explain_request(const json& body) const {
    ExplainRequest r;
    // Without an explicit k, show as many as the smaller concept bank allows up to the usual three.
    r.k = std::min({r.k, model_->concept_count(Level::low), model_->concept_count(Level::high)});
    if (body.contains("k")) r.k = api::index_field(body, "k");
    if (body.contains("class_low")) r.class_low = api::index_field(body, "class_low");
    if (body.contains("class_high")) r.class_high = api::index_field(body, "class_high");
    return r;
  }

  json predict(const json& body) const {
    api::reject_unknown(body, {"sample_id", "features", "shape"});
    return api::to_json(predict_hier(model(), resolve_sample(body)));
  }

  json explain(const json& body) const {
    api::reject_unknown(body, {"sample_id", "features", "shape", "k", "class_low", "class_high"});
    return api::to_json(explain_hier(model(), resolve_sample(body), explain_request(body)));
  }

  Response session_route(std::string_view method, const std::string& id, const std::string& action, const json& body) {
    auto session = sessions_.get(id);
    if (method == "GET" && action == "log") return {200, {{"session_id", id}, {"log", session->log()}}};
    require(method == "POST", ErrorKind::not_found, "no route " + std::string(method) + " " + action);
    if (action == "repredict") {
      api::reject_unknown(body, {"sample_id", "features", "shape", "k", "class_low", "class_high"});
      json out = api::to_json(session->repredict(resolve_sample(body), explain_request(body)));
      out["session_id"] = id;
      return {200, out};
    }
    if (action == "edit-weight") {
      api::reject_unknown(body, {"level", "class", "concept", "value"});
      session->edit_weight(parse_level(api::field<std::string>(body, "level")), api::index_field(body, "class"),
                           api::index_field(body, "concept"), api::field<double>(body, "value"));
    } else if (action == "mask") {
      api::reject_unknown(body, {"high"});
      session->mask_to_high_class(api::index_field(body, "high"));
    } else if (action == "override") {
      api::reject_unknown(body, {"overrides"});
      const json& list = body.contains("overrides") ? body.at("overrides") : json();
      require(list.is_array(), ErrorKind::invalid_argument, "'overrides' must be an array");
      std::vector<ConceptOverride> ovs;
      for (const auto& o : list) {
        api::reject_unknown(o, {"level", "concept", "value"});
        ovs.push_back({parse_level(api::field<std::string>(o, "level")), api::index_field(o, "concept"),
                       api::field<double>(o, "value")});
      }
      session->override_concepts(ovs);
    } else if (action == "reset") {
      api::reject_unknown(body, {});
      session->reset();
    } else {
      fail(ErrorKind::not_found, "no session action '" + action + "'");
    }
    return {200, {{"session_id", id}, {"log_length", session->log().size()}}};
  }

  std::shared_ptr<const HilModel> model_;
  std::optional<DatasetBundle> bundle_;
  SessionRegistry sessions_;
  httplib::Server server_;
};

}  // namespace hilcbm
