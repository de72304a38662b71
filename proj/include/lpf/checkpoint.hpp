#pragma once

// Plain-text checkpoint of a model's parameter values.
//
//   lpf-checkpoint 1
//   config vocab_size=<n> embed_dim=<n> ... seed=<n>
//   tensor <name> <rank> <dim>...
//   <values, space separated, 17 significant digits>
//   ...
//   end
//
// Optimizer state is not stored.

#include <charconv>
#include <cstdlib>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "lpf/errors.hpp"
#include "lpf/model.hpp"
#include "lpf/textio.hpp"

namespace lpf {

inline constexpr int kCheckpointVersion = 1;

inline std::string serialize_checkpoint(const VqaModelParams& p) {
  const auto& c = p.config;
  std::ostringstream os;
  os << "lpf-checkpoint " << kCheckpointVersion << "\n";
  os << "config vocab_size=" << c.vocab_size << " embed_dim=" << c.embed_dim << " q_dim=" << c.q_dim
     << " v_in_dim=" << c.v_in_dim << " v_dim=" << c.v_dim << " joint_dim=" << c.joint_dim
     << " hidden_dim=" << c.hidden_dim << " num_answers=" << c.num_answers
     << " qo_hidden_dim=" << c.qo_hidden_dim << " seed=" << c.seed << "\n";
  for (const Parameter* param : p.all()) {
    os << "tensor " << param->name << ' ' << param->shape().size();
    for (auto d : param->shape()) os << ' ' << d;
    os << '\n';
    const auto vals = param->value.data();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      if (i) os << ' ';
      os << format_double(vals[i]);
    }
    os << '\n';
  }
  os << "end\n";
  return os.str();
}

namespace detail {

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && line[i] == ' ') ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::uint64_t parse_uint(std::string_view s, std::size_t line) {
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw FormatError("expected an unsigned integer, got '" + std::string(s) + "'", line);
  }
  return v;
}

inline double parse_real(std::string_view s, std::size_t line) {
  const std::string tmp(s);
  char* end = nullptr;
  const double v = std::strtod(tmp.c_str(), &end);
  if (tmp.empty() || end != tmp.c_str() + tmp.size()) {
    throw FormatError("expected a real number, got '" + tmp + "'", line);
  }
  return v;
}

}  // namespace detail

inline VqaModelParams parse_checkpoint(std::string_view text) {
  std::vector<std::string_view> lines;
  for (std::size_t pos = 0; pos < text.size();) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    lines.push_back(text.substr(pos, end - pos));
    pos = end + 1;
  }
  auto line_at = [&](std::size_t i) -> std::string_view {
    if (i >= lines.size()) throw FormatError("unexpected end of checkpoint", i + 1);
    return lines[i];
  };

  const auto head = detail::split_ws(line_at(0));
  if (head.size() != 2 || head[0] != "lpf-checkpoint") throw FormatError("not a checkpoint file", 1);
  if (detail::parse_uint(head[1], 1) != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::string(head[1]), 1);
  }

  ModelConfig cfg;
  const auto cfg_tokens = detail::split_ws(line_at(1));
  if (cfg_tokens.empty() || cfg_tokens[0] != "config") throw FormatError("expected config line", 2);
  std::size_t seen = 0;
  for (std::size_t i = 1; i < cfg_tokens.size(); ++i) {
    const auto kv = cfg_tokens[i];
    const auto eq = kv.find('=');
    if (eq == std::string_view::npos) throw FormatError("config entry without '='", 2);
    const auto key = kv.substr(0, eq);
    const auto val = detail::parse_uint(kv.substr(eq + 1), 2);
    if (key == "vocab_size") cfg.vocab_size = val;
    else if (key == "embed_dim") cfg.embed_dim = val;
    else if (key == "q_dim") cfg.q_dim = val;
    else if (key == "v_in_dim") cfg.v_in_dim = val;
    else if (key == "v_dim") cfg.v_dim = val;
    else if (key == "joint_dim") cfg.joint_dim = val;
    else if (key == "hidden_dim") cfg.hidden_dim = val;
    else if (key == "num_answers") cfg.num_answers = val;
    else if (key == "qo_hidden_dim") cfg.qo_hidden_dim = val;
    else if (key == "seed") cfg.seed = val;
    else throw FormatError("unknown config key '" + std::string(key) + "'", 2);
    ++seen;
  }
  if (seen != 10) throw FormatError("config line is incomplete", 2);
  try {
    cfg.validate();
  } catch (const InvalidArgument& e) {
    throw FormatError(e.what(), 2);
  }

  // Shapes come from the config; the file must agree with them.
  VqaModelParams p = init_params(cfg);
  std::size_t li = 2;
  for (Parameter* param : p.all()) {
    const std::size_t header_line = li + 1;
    const auto t = detail::split_ws(line_at(li));
    if (t.size() < 3 || t[0] != "tensor") throw FormatError("expected tensor header", header_line);
    if (t[1] != param->name) {
      throw FormatError("expected tensor '" + param->name + "', found '" + std::string(t[1]) + "'",
                        header_line);
    }
    const auto rank = detail::parse_uint(t[2], header_line);
    if (t.size() != 3 + rank) throw FormatError("tensor header rank mismatch", header_line);
    Shape shape;
    for (std::size_t d = 0; d < rank; ++d) shape.push_back(detail::parse_uint(t[3 + d], header_line));
    if (shape != param->shape()) {
      throw FormatError("tensor '" + param->name + "' has shape " + shape_str(shape) + ", config implies " +
                            shape_str(param->shape()),
                        header_line);
    }
    const auto vals = detail::split_ws(line_at(li + 1));
    if (vals.size() != param->value.size()) {
      throw FormatError("tensor '" + param->name + "' expects " + std::to_string(param->value.size()) +
                            " values, found " + std::to_string(vals.size()),
                        li + 2);
    }
    for (std::size_t i = 0; i < vals.size(); ++i) param->value[i] = detail::parse_real(vals[i], li + 2);
    li += 2;
  }
  if (line_at(li) != "end") throw FormatError("expected 'end'", li + 1);
  return p;
}

inline void write_checkpoint(const VqaModelParams& p, const std::string& path) {
  write_file(path, serialize_checkpoint(p));
}

inline VqaModelParams read_checkpoint(const std::string& path) { return parse_checkpoint(read_file(path)); }

}  // namespace lpf
