#include "hamil/service.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <thread>

#include "httplib.h"

namespace hamil {

std::vector<long> quantize_heat(std::span<const double> p, long total) {
  std::vector<long> q(p.size(), 0);
  if (p.empty()) return q;
  double sum = 0.0;
  for (double v : p) {
    if (!std::isfinite(v) || v < 0.0) throw NumericError("heat map needs finite non-negative mass");
    sum += v;
  }
  if (sum <= 0.0) throw NumericError("heat map has no mass");
  std::vector<double> frac(p.size());
  long assigned = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double exact = p[i] / sum * static_cast<double>(total);
    q[i] = static_cast<long>(std::floor(exact));
    frac[i] = exact - static_cast<double>(q[i]);
    assigned += q[i];
  }
  std::vector<std::size_t> order(p.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (long r = total - assigned, k = 0; r > 0; --r, ++k) ++q[order[static_cast<std::size_t>(k) % order.size()]];
  return q;
}

json episode_snapshot(const Episode& ep, std::uint64_t seq, const std::string& event) {
  const MazeWorld& w = ep.world();
  const GroundState gs = ep.ground_state_now();
  const auto p = born(gs.psi);
  const auto argmax = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
  std::vector<double> heat;
  for (long q : quantize_heat(p)) heat.push_back(static_cast<double>(q) / static_cast<double>(kHeatScale));
  json j{{"v", kWireVersion},
         {"seq", seq},
         {"event", event},
         {"step", ep.steps()},
         {"budget", ep.budget()},
         {"width", w.width()},
         {"height", w.height()},
         {"grid", w.to_text()},
         {"start", w.start},
         {"goal", w.goal},
         {"position", ep.position()},
         {"mode", mode_name(ep.options().mode)},
         {"done", ep.done()},
         {"success", ep.success()},
         {"e0", gs.energy},
         {"gap", gs.gap},
         {"argmax", argmax},
         {"heat", heat}};
  if (event == "step" && !ep.records().empty()) {
    const StepRecord& r = ep.records().back();
    j["last"] = json{{"from", r.from}, {"to", r.to}, {"action", action_name(r.action)}, {"decision", r.decision}};
  }
  return j;
}

namespace {

const char* edit_event(const json& line) {
  const std::string e = line.at("edit");
  if (e == "wall") return "wall";
  if (e == "potential") return "potential";
  if (e == "goal") return "goal";
  if (e == "mode") return "mode";
  throw UsageError("unknown edit '" + e + "'");
}

void apply_edit(Episode& ep, const json& line) {
  const std::string e = line.at("edit");
  if (e == "wall") {
    ep.set_wall(line.at("cell"), line.at("wall"));
  } else if (e == "potential") {
    ep.shift_potential(line.at("cell"), line.at("dv"));
  } else if (e == "goal") {
    ep.set_goal(line.at("cell"));
  } else {
    ep.set_mode(parse_mode(line.at("mode")));
  }
}

}  // namespace

std::vector<json> replay_snapshots(const MazeAgent& agent, const std::vector<json>& log) {
  if (log.empty() || log[0].value("type", "") != "episode") throw UsageError("log does not start with an episode header");
  const json& head = log[0];
  MazeWorld w = MazeWorld::from_text(head.at("maze"));
  Episode ep(agent, w, EpisodeOptions::from_json(head.at("options")), script_from_json(head.at("script"), w));
  std::vector<json> out;
  out.push_back(episode_snapshot(ep, 0, "create"));
  for (std::size_t i = 1; i < log.size(); ++i) {
    const std::string type = log[i].value("type", "");
    if (type == "step") {
      ep.step();
      out.push_back(episode_snapshot(ep, out.size(), "step"));
    } else if (type == "edit") {
      apply_edit(ep, log[i]);
      out.push_back(episode_snapshot(ep, out.size(), edit_event(log[i])));
    }
  }
  return out;
}

SessionManager::SessionManager(const MazeAgent& agent, std::filesystem::path log_dir, std::size_t max_sessions)
    : agent_(agent),
      checksum_(hex64(agent.params().checksum())),
      log_dir_(std::move(log_dir)),
      max_sessions_(max_sessions) {
  const std::vector<std::string> stages = {"actions", "perception", "alignment"};
  agent.require_stages(stages, "serving");
  if (!log_dir_.empty()) std::filesystem::create_directories(log_dir_);
}

namespace {

std::size_t parse_cell(const json& v, const MazeWorld& w) {
  std::size_t c = 0;
  if (v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0)) {
    c = v.get<std::size_t>();
  } else if (v.is_array() && v.size() == 2 && v[0].is_number_integer() && v[1].is_number_integer()) {
    const long long x = v[0], y = v[1];
    if (x < 0 || y < 0 || x >= static_cast<long long>(w.width()) || y >= static_cast<long long>(w.height())) {
      throw RequestError(400, "cell " + v.dump() + " is outside the maze");
    }
    c = w.cell(static_cast<std::size_t>(x), static_cast<std::size_t>(y));
  } else {
    throw RequestError(400, "cell must be an index or [x, y]");
  }
  if (c >= w.cells()) throw RequestError(400, "cell " + std::to_string(c) + " is outside the maze");
  return c;
}

}  // namespace

json SessionManager::create(const json& request) {
  if (!request.is_object()) throw RequestError(400, "request body must be a JSON object");
  const auto& spec = agent_.config().maze;
  if (request.contains("width") || request.contains("height")) {
    const auto wd = request.value("width", spec.width), ht = request.value("height", spec.height);
    if (wd != spec.width || ht != spec.height) {
      throw RequestError(400, "maze size " + std::to_string(wd) + "x" + std::to_string(ht) + " does not match the model (" +
                                  std::to_string(spec.width) + "x" + std::to_string(spec.height) + ")");
    }
  }
  MazeWorld world;
  try {
    if (request.contains("maze")) {
      world = MazeWorld::from_text(request.at("maze").get<std::string>());
      if (world.width() != spec.width || world.height() != spec.height) {
        throw RequestError(400, "maze size " + std::to_string(world.width()) + "x" + std::to_string(world.height()) +
                                    " does not match the model (" + std::to_string(spec.width) + "x" +
                                    std::to_string(spec.height) + ")");
      }
    } else if (request.contains("seed")) {
      world = generate_maze(request.at("seed").get<std::uint64_t>(), spec);
    } else {
      throw RequestError(400, "request needs \"seed\" or \"maze\"");
    }
    EpisodeOptions opts = EpisodeOptions::from_agent(agent_, parse_mode(request.value("mode", std::string("dual"))));
    opts.budget = request.value("budget", opts.budget);
    opts.seed = request.value("walk_seed", opts.seed);
    opts.always_plan = true;
    PerturbScript script;
    if (request.contains("script")) script = script_from_json(request.at("script"), world);

    auto s = std::make_shared<Session>();
    s->episode = std::make_unique<Episode>(agent_, std::move(world), opts, std::move(script));
    std::lock_guard lock(mu_);
    if (sessions_.size() >= max_sessions_) {
      // Drop the oldest finished session before refusing.
      auto it = std::find_if(sessions_.begin(), sessions_.end(), [](const auto& kv) {
        std::lock_guard l(kv.second->mu);
        return kv.second->episode->done();
      });
      if (it == sessions_.end()) throw RequestError(503, "session limit reached");
      sessions_.erase(it);
    }
    char buf[16];
    std::snprintf(buf, sizeof buf, "s%06llu", static_cast<unsigned long long>(next_id_++));
    s->id = buf;
    sessions_[s->id] = s;
    std::lock_guard slock(s->mu);
    json snap = record(*s, "create");
    return json{{"session", s->id}, {"snapshot", snap}};
  } catch (const RequestError&) {
    throw;
  } catch (const json::exception& e) {
    throw RequestError(400, std::string("malformed request: ") + e.what());
  } catch (const Error& e) {
    throw RequestError(400, e.what());
  }
}

std::shared_ptr<SessionManager::Session> SessionManager::find(const std::string& id) const {
  std::lock_guard lock(mu_);
  auto it = sessions_.find(id);
  if (it == sessions_.end()) throw RequestError(404, "no session '" + id + "'");
  return it->second;
}

json SessionManager::record(Session& s, const std::string& event) {
  json snap = episode_snapshot(*s.episode, s.snapshots.size(), event);
  snap["session"] = s.id;
  s.snapshots.push_back(snap);
  persist(s);
  s.cv.notify_all();
  return snap;
}

void SessionManager::persist(const Session& s) const {
  if (log_dir_.empty()) return;
  std::ofstream out(log_dir_ / (s.id + ".ndjson"), std::ios::trunc);
  out << s.episode->log_ndjson();
}

json SessionManager::step(const std::string& id) {
  auto s = find(id);
  std::lock_guard lock(s->mu);
  if (s->episode->done()) throw RequestError(409, "episode is finished");
  s->episode->step();
  return record(*s, "step");
}

json SessionManager::edit(const std::string& id, const json& request) {
  auto s = find(id);
  std::lock_guard lock(s->mu);
  Episode& ep = *s->episode;
  if (!request.is_object() || !request.contains("action")) throw RequestError(400, "edit needs an \"action\"");
  if (ep.done()) throw RequestError(409, "episode is finished");
  const std::string action = request.at("action").is_string() ? request.at("action").get<std::string>() : "";
  if (action == "mode") return set_mode_locked(*s, request);
  if (!request.contains("cell")) throw RequestError(400, "edit needs a \"cell\"");
  const std::size_t cell = parse_cell(request.at("cell"), ep.world());
  try {
    if (action == "toggle_wall") {
      const bool wall = !ep.world().is_wall(cell);
      if (wall && (cell == ep.position() || cell == ep.world().goal)) {
        throw RequestError(409, "cannot place a wall on the agent or the goal");
      }
      ep.set_wall(cell, wall);
      return record(*s, "wall");
    }
    if (action == "add_potential") {
      const json& dv = request.value("dv", json(1.0));
      if (!dv.is_number()) throw RequestError(400, "dv must be a number");
      const double d = dv.get<double>();
      if (!std::isfinite(d) || std::abs(d) > 1e6) throw RequestError(400, "dv must be finite and below 1e6 in size");
      ep.shift_potential(cell, d);
      return record(*s, "potential");
    }
    if (action == "move_goal") {
      if (ep.world().is_wall(cell)) throw RequestError(409, "goal must be an open cell");
      ep.set_goal(cell);
      return record(*s, "goal");
    }
  } catch (const RequestError&) {
    throw;
  } catch (const Error& e) {
    throw RequestError(400, e.what());
  }
  throw RequestError(400, "unknown edit action '" + action + "' (toggle_wall, add_potential, move_goal, mode)");
}

json SessionManager::set_mode_locked(Session& s, const json& request) {
  if (!request.contains("mode") || !request.at("mode").is_string()) throw RequestError(400, "mode edit needs a \"mode\"");
  if (s.episode->done()) throw RequestError(409, "episode is finished");
  try {
    s.episode->set_mode(parse_mode(request.at("mode")));
  } catch (const Error& e) {
    throw RequestError(400, e.what());
  }
  return record(s, "mode");
}

json SessionManager::set_mode(const std::string& id, const json& request) {
  auto s = find(id);
  std::lock_guard lock(s->mu);
  if (!request.is_object()) throw RequestError(400, "request body must be a JSON object");
  return set_mode_locked(*s, request);
}

json SessionManager::snapshot(const std::string& id) const {
  auto s = find(id);
  std::lock_guard lock(s->mu);
  return s->snapshots.back();
}

std::vector<json> SessionManager::stream(const std::string& id, std::int64_t after) const {
  auto s = find(id);
  std::lock_guard lock(s->mu);
  // seq equals the index in the history.
  const std::size_t from = after < 0 ? 0 : static_cast<std::size_t>(after) + 1;
  if (from >= s->snapshots.size()) return {};
  return {s->snapshots.begin() + static_cast<std::ptrdiff_t>(from), s->snapshots.end()};
}

bool SessionManager::wait(const std::string& id, std::int64_t after, double timeout_s) const {
  auto s = find(id);
  std::unique_lock lock(s->mu);
  auto fresh = [&] { return static_cast<std::int64_t>(s->snapshots.size()) > after + 1; };
  s->cv.wait_for(lock, std::chrono::duration<double>(timeout_s), [&] { return fresh() || s->episode->done(); });
  return fresh();
}

bool SessionManager::done(const std::string& id) const {
  auto s = find(id);
  std::lock_guard lock(s->mu);
  return s->episode->done();
}

std::string SessionManager::log(const std::string& id) const {
  auto s = find(id);
  std::lock_guard lock(s->mu);
  return s->episode->log_ndjson();
}

void SessionManager::close(const std::string& id) {
  std::lock_guard lock(mu_);
  if (sessions_.erase(id) == 0) throw RequestError(404, "no session '" + id + "'");
}

std::size_t SessionManager::size() const {
  std::lock_guard lock(mu_);
  return sessions_.size();
}

// ---------------------------------------------------------------------------
// HTTP

struct LiveService::Impl {
  httplib::Server server;
  std::thread thread;
};

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return json::object();
  try {
    return json::parse(req.body);
  } catch (const json::exception& e) {
    throw RequestError(400, std::string("body is not JSON: ") + e.what());
  }
}

std::uint64_t parse_u64(const std::string& s, const char* what) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
    throw RequestError(400, std::string(what) + " must be a non-negative integer");
  }
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw RequestError(400, std::string(what) + " must be a non-negative integer");
  }
}

template <typename F>
httplib::Server::Handler guarded(F f) {
  return [f](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const RequestError& e) {
      send_json(res, e.status(), json{{"error", e.what()}});
    } catch (const std::exception& e) {
      send_json(res, 500, json{{"error", e.what()}});
    }
  };
}

}  // namespace

LiveService::LiveService(const MazeAgent& agent, ServiceOptions opts)
    : impl_(std::make_unique<Impl>()), sessions_(agent, opts.log_dir, opts.max_sessions), opts_(std::move(opts)) {
  auto& srv = impl_->server;
  SessionManager& sm = sessions_;
  const double follow_timeout = opts_.follow_timeout_s;

  srv.Get("/health", guarded([&sm](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200,
              json{{"status", "ok"}, {"version", kWireVersion}, {"model", sm.model_checksum()}, {"sessions", sm.size()},
                   {"width", sm.agent().config().maze.width}, {"height", sm.agent().config().maze.height}});
  }));
  srv.Post("/v1/sessions", guarded([&sm](const httplib::Request& req, httplib::Response& res) {
    send_json(res, 201, sm.create(parse_body(req)));
  }));
  srv.Post(R"(/v1/sessions/([A-Za-z0-9]+)/step)", guarded([&sm](const httplib::Request& req, httplib::Response& res) {
    send_json(res, 200, sm.step(req.matches[1]));
  }));
  srv.Post(R"(/v1/sessions/([A-Za-z0-9]+)/edit)", guarded([&sm](const httplib::Request& req, httplib::Response& res) {
    send_json(res, 200, sm.edit(req.matches[1], parse_body(req)));
  }));
  srv.Post(R"(/v1/sessions/([A-Za-z0-9]+)/mode)", guarded([&sm](const httplib::Request& req, httplib::Response& res) {
    send_json(res, 200, sm.set_mode(req.matches[1], parse_body(req)));
  }));
  srv.Get(R"(/v1/sessions/([A-Za-z0-9]+)/snapshot)", guarded([&sm](const httplib::Request& req, httplib::Response& res) {
    send_json(res, 200, sm.snapshot(req.matches[1]));
  }));
  srv.Get(R"(/v1/sessions/([A-Za-z0-9]+)/log)", guarded([&sm](const httplib::Request& req, httplib::Response& res) {
    res.set_content(sm.log(req.matches[1]), "application/x-ndjson");
  }));
  srv.Delete(R"(/v1/sessions/([A-Za-z0-9]+))", guarded([&sm](const httplib::Request& req, httplib::Response& res) {
    sm.close(req.matches[1]);
    send_json(res, 200, json{{"closed", std::string(req.matches[1])}});
  }));
  srv.Get(R"(/v1/sessions/([A-Za-z0-9]+)/stream)",
          guarded([&sm, follow_timeout](const httplib::Request& req, httplib::Response& res) {
            const std::string id = req.matches[1];
            // `after` is the last seq the client already has; absent means everything.
            std::int64_t after = -1;
            if (req.has_param("after")) after = static_cast<std::int64_t>(parse_u64(req.get_param_value("after"), "after"));
            const std::string follow = req.has_param("follow") ? req.get_param_value("follow") : "0";
            if (follow != "0" && follow != "1") throw RequestError(400, "follow must be 0 or 1");
            if (follow == "0") {
              std::string body;
              for (const auto& s : sm.stream(id, after)) body += s.dump() + "\n";
              res.set_content(body, "application/x-ndjson");
              return;
            }
            sm.snapshot(id);  // unknown sessions fail before the stream starts
            auto last = std::make_shared<std::int64_t>(after);
            const auto deadline = std::chrono::steady_clock::now() + std::chrono::duration<double>(follow_timeout);
            res.set_chunked_content_provider(
                "application/x-ndjson", [&sm, id, last, deadline](std::size_t, httplib::DataSink& sink) {
                  try {
                    // Read done first: a finished session gains no snapshots later.
                    const bool finished = sm.done(id);
                    std::string body;
                    for (const auto& s : sm.stream(id, *last)) {
                      body += s.dump() + "\n";
                      *last = s.at("seq").get<std::int64_t>();
                    }
                    if (!body.empty() && !sink.write(body.data(), body.size())) return false;
                    if (finished || std::chrono::steady_clock::now() > deadline || !sink.is_writable()) {
                      sink.done();
                      return true;
                    }
                    sm.wait(id, *last, 0.25);
                    return true;
                  } catch (const RequestError&) {
                    sink.done();  // session closed while following
                    return true;
                  }
                });
          }));
}

LiveService::~LiveService() { stop(); }

int LiveService::start() {
  auto& srv = impl_->server;
  if (opts_.port == 0) {
    port_ = srv.bind_to_any_port(opts_.host);
  } else {
    port_ = srv.bind_to_port(opts_.host, opts_.port) ? opts_.port : -1;
  }
  if (port_ < 0) throw Error("cannot bind " + opts_.host + ":" + std::to_string(opts_.port));
  impl_->thread = std::thread([&srv] { srv.listen_after_bind(); });
  srv.wait_until_ready();
  return port_;
}

void LiveService::wait() {
  if (impl_->thread.joinable()) impl_->thread.join();
}

void LiveService::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace hamil
