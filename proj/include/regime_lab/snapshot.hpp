#pragma once

// Text snapshot of a network and, optionally, its Adam state. Doubles are
// written as C99 hex floats so a save/load cycle is bit-exact.
//
//   regime_lab.snapshot 1
//   spec {"arch":"switching_resnet",...}
//   param <name> <rows> <cols> <v0> <v1> ...
//   norm <name> <width> <initialized 0|1> <momentum> <epsilon>
//   running_mean <v0> ...
//   running_var <v0> ...
//   adam <step_count> <beta1> <beta2> <epsilon> <tensors>
//   moment1 <rows> <cols> <v0> ...     (one pair per tensor, in param order)
//   moment2 <rows> <cols> <v0> ...
//   end
//
// Params and norms appear in the network's visiting order; the loader checks
// names and shapes against a network rebuilt from the spec line.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "regime_lab/blocks.hpp"
#include "regime_lab/nncore.hpp"

namespace regime_lab {

inline constexpr int kSnapshotVersion = 1;

inline std::string to_string(OutputKind k) { return k == OutputKind::sigmoid ? "sigmoid" : "identity"; }

inline OutputKind parse_output_kind(const std::string& s) {
  if (s == "sigmoid") return OutputKind::sigmoid;
  if (s == "identity") return OutputKind::identity;
  throw ConfigError("unknown output kind '" + s + "' (expected sigmoid or identity)");
}

inline nlohmann::ordered_json spec_to_json(const ModelSpec& s) {
  return nlohmann::ordered_json{{"arch", to_string(s.arch)},
                                {"input_width", s.input_width},
                                {"hidden_widths", s.hidden_widths},
                                {"n_blocks", s.n_blocks},
                                {"attention_blocks", s.attention_blocks},
                                {"attention_hidden_width", s.attention_hidden_width},
                                {"switch_input_width", s.switch_input_width},
                                {"switch_blocks", s.switch_blocks},
                                {"output", to_string(s.output)},
                                {"leaky_slope", s.leaky_slope}};
}

inline ModelSpec spec_from_json(const nlohmann::json& j) {
  ModelSpec s;
  s.arch = parse_architecture(j.at("arch").get<std::string>());
  s.input_width = j.at("input_width").get<std::size_t>();
  s.hidden_widths = j.at("hidden_widths").get<std::vector<std::size_t>>();
  s.n_blocks = j.at("n_blocks").get<std::size_t>();
  s.attention_blocks = j.at("attention_blocks").get<std::vector<std::size_t>>();
  s.attention_hidden_width = j.at("attention_hidden_width").get<std::size_t>();
  s.switch_input_width = j.at("switch_input_width").get<std::size_t>();
  s.switch_blocks = j.at("switch_blocks").get<std::size_t>();
  s.output = parse_output_kind(j.at("output").get<std::string>());
  s.leaky_slope = j.at("leaky_slope").get<double>();
  s.validate();
  return s;
}

namespace detail {

inline void put_hex(std::ostream& out, double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%a", v);
  out << ' ' << buf;
}

inline void put_values(std::ostream& out, std::span<const double> v) {
  for (double x : v) put_hex(out, x);
}

class SnapshotReader {
 public:
  SnapshotReader(std::istream& in, std::string source) : in_(in), source_(std::move(source)) {}

  /// Next line split into its keyword and the rest.
  std::istringstream expect(const std::string& keyword) {
    std::string line;
    if (!std::getline(in_, line)) fail("unexpected end of file, expected '" + keyword + "'");
    ++line_no_;
    std::istringstream ls(line);
    std::string kw;
    ls >> kw;
    if (kw != keyword) fail("expected '" + keyword + "', found '" + kw + "'");
    return ls;
  }

  std::string peek_keyword() {
    const auto pos = in_.tellg();
    std::string line;
    if (!std::getline(in_, line)) return {};
    in_.seekg(pos);
    std::istringstream ls(line);
    std::string kw;
    ls >> kw;
    return kw;
  }

  double number(std::istringstream& ls) {
    std::string tok;
    if (!(ls >> tok)) fail("missing number");
    char* end = nullptr;
    const double v = std::strtod(tok.c_str(), &end);
    if (end != tok.c_str() + tok.size()) fail("bad number '" + tok + "'");
    return v;
  }

  std::size_t count(std::istringstream& ls) {
    std::size_t v = 0;
    if (!(ls >> v)) fail("missing count");
    return v;
  }

  void values(std::istringstream& ls, std::span<double> out) {
    for (double& v : out) v = number(ls);
    std::string extra;
    if (ls >> extra) fail("trailing data '" + extra + "'");
  }

  [[noreturn]] void fail(const std::string& why) const {
    throw DataError(source_ + ":" + std::to_string(line_no_) + ": " + why);
  }

 private:
  std::istream& in_;
  std::string source_;
  std::size_t line_no_ = 0;
};

}  // namespace detail

inline void write_snapshot(std::ostream& out, const Network& net, const AdamState* adam = nullptr) {
  out << "regime_lab.snapshot " << kSnapshotVersion << '\n';
  out << "spec " << spec_to_json(net.spec()).dump() << '\n';
  net.for_each_param([&](const std::string& name, const Matrix& m, bool) {
    out << "param " << name << ' ' << m.rows() << ' ' << m.cols();
    detail::put_values(out, m.values());
    out << '\n';
  });
  net.for_each_norm([&](const std::string& name, const BatchNormState& n) {
    out << "norm " << name << ' ' << n.width() << ' ' << (n.initialized ? 1 : 0);
    detail::put_hex(out, n.momentum);
    detail::put_hex(out, n.epsilon);
    out << "\nrunning_mean";
    detail::put_values(out, n.running_mean);
    out << "\nrunning_var";
    detail::put_values(out, n.running_var);
    out << '\n';
  });
  if (adam) {
    out << "adam " << adam->step_count;
    detail::put_hex(out, adam->beta1);
    detail::put_hex(out, adam->beta2);
    detail::put_hex(out, adam->epsilon);
    out << ' ' << adam->first_moment.size() << '\n';
    for (std::size_t k = 0; k < adam->first_moment.size(); ++k) {
      for (const Matrix* m : {&adam->first_moment[k], &adam->second_moment[k]}) {
        out << (m == &adam->first_moment[k] ? "moment1 " : "moment2 ") << m->rows() << ' ' << m->cols();
        detail::put_values(out, m->values());
        out << '\n';
      }
    }
  }
  out << "end\n";
}

struct Snapshot {
  Network network;
  std::optional<AdamState> adam;
};

inline Snapshot read_snapshot(std::istream& in, const std::string& source = "snapshot") {
  detail::SnapshotReader rd(in, source);
  {
    auto ls = rd.expect("regime_lab.snapshot");
    int version = 0;
    if (!(ls >> version) || version != kSnapshotVersion) {
      rd.fail("unsupported snapshot version (expected " + std::to_string(kSnapshotVersion) + ")");
    }
  }
  Snapshot snap;
  {
    auto ls = rd.expect("spec");
    std::string rest;
    std::getline(ls, rest);
    try {
      snap.network = Network(spec_from_json(nlohmann::json::parse(rest)));
    } catch (const nlohmann::json::exception& e) {
      rd.fail(std::string("bad spec: ") + e.what());
    } catch (const ConfigError& e) {
      rd.fail(std::string("bad spec: ") + e.what());
    }
  }
  snap.network.for_each_param([&](const std::string& name, Matrix& m, bool) {
    auto ls = rd.expect("param");
    std::string got;
    ls >> got;
    if (got != name) rd.fail("expected param '" + name + "', found '" + got + "'");
    const std::size_t r = rd.count(ls), c = rd.count(ls);
    if (r != m.rows() || c != m.cols()) {
      rd.fail("param " + name + " has shape " + std::to_string(r) + "x" + std::to_string(c) + ", spec implies " +
              std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
    }
    rd.values(ls, m.values());
  });
  snap.network.for_each_norm([&](const std::string& name, BatchNormState& n) {
    auto ls = rd.expect("norm");
    std::string got;
    ls >> got;
    if (got != name) rd.fail("expected norm '" + name + "', found '" + got + "'");
    if (rd.count(ls) != n.width()) rd.fail("norm " + name + " width mismatch");
    n.initialized = rd.count(ls) != 0;
    n.momentum = rd.number(ls);
    n.epsilon = rd.number(ls);
    auto lm = rd.expect("running_mean");
    rd.values(lm, n.running_mean);
    auto lv = rd.expect("running_var");
    rd.values(lv, n.running_var);
  });
  if (rd.peek_keyword() == "adam") {
    auto ls = rd.expect("adam");
    AdamState a;
    a.step_count = rd.count(ls);
    a.beta1 = rd.number(ls);
    a.beta2 = rd.number(ls);
    a.epsilon = rd.number(ls);
    const std::size_t n = rd.count(ls);
    for (std::size_t k = 0; k < n; ++k) {
      for (const char* kw : {"moment1", "moment2"}) {
        auto lm = rd.expect(kw);
        const std::size_t r = rd.count(lm), c = rd.count(lm);
        Matrix m(r, c);
        rd.values(lm, m.values());
        (kw[6] == '1' ? a.first_moment : a.second_moment).push_back(std::move(m));
      }
    }
    snap.adam = std::move(a);
  }
  rd.expect("end");
  return snap;
}

inline void save_snapshot(const std::string& path, const Network& net, const AdamState* adam = nullptr) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  write_snapshot(out, net, adam);
  if (!out) throw std::runtime_error(path + ": write failed");
}

inline Snapshot load_snapshot(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError(path + ": cannot open");
  return read_snapshot(in, path);
}

}  // namespace regime_lab
