#include "plrnn/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

namespace plrnn {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path with_ext(const fs::path& stem, const char* ext) {
  fs::path p = stem;
  p += ext;
  return p;
}

void put_le(std::ostream& os, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(bits >> (8 * i));
  os.write(reinterpret_cast<const char*>(buf), 8);
}

double get_le(const unsigned char* buf) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= std::uint64_t(buf[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

std::string format_double(double v) {
  std::ostringstream ss;
  ss << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return ss.str();
}

}  // namespace

const Mat& BlockFile::block(const std::string& name) const {
  for (const auto& [n, m] : blocks)
    if (n == name) return m;
  throw FormatError("missing block '" + name + "'", 0);
}

bool BlockFile::has_block(const std::string& name) const {
  for (const auto& b : blocks)
    if (b.first == name) return true;
  return false;
}

void write_block_file(const fs::path& stem, const BlockFile& file) {
  if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
  std::ofstream bin(with_ext(stem, ".bin"), std::ios::binary | std::ios::trunc);
  if (!bin) throw PlrnnError("cannot open " + with_ext(stem, ".bin").string() + " for writing");
  json header;
  header["format"] = "plrnn-blocks";
  header["version"] = kFileFormatVersion;
  header["kind"] = file.kind;
  header["meta"] = file.meta;
  header["blocks"] = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, m] : file.blocks) {
    header["blocks"].push_back(
        {{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", offset}});
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) put_le(bin, m(i, j));
    offset += 8 * std::uint64_t(m.size());
  }
  if (!bin) throw PlrnnError("write failed: " + with_ext(stem, ".bin").string());
  std::ofstream js(with_ext(stem, ".json"), std::ios::trunc);
  if (!js) throw PlrnnError("cannot open " + with_ext(stem, ".json").string() + " for writing");
  js << header.dump(2) << '\n';
}

BlockFile read_block_file(const fs::path& stem) {
  std::ifstream js(with_ext(stem, ".json"));
  if (!js) throw PlrnnError("cannot open " + with_ext(stem, ".json").string());
  json header;
  try {
    js >> header;
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("sidecar is not valid JSON: ") + e.what(), e.byte);
  }
  if (header.value("format", "") != "plrnn-blocks") throw FormatError("unknown sidecar format", 0);
  const int version = header.value("version", -1);
  if (version != kFileFormatVersion) {
    throw FormatError("file version " + std::to_string(version) + " does not match supported version " +
                          std::to_string(kFileFormatVersion),
                      0);
  }
  std::ifstream bin(with_ext(stem, ".bin"), std::ios::binary);
  if (!bin) throw PlrnnError("cannot open " + with_ext(stem, ".bin").string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());

  BlockFile out;
  out.kind = header.value("kind", "");
  out.meta = header.value("meta", json::object());
  for (const auto& b : header.at("blocks")) {
    const auto rows = b.at("rows").get<Eigen::Index>();
    const auto cols = b.at("cols").get<Eigen::Index>();
    const auto offset = b.at("offset").get<std::uint64_t>();
    if (rows < 0 || cols < 0) throw FormatError("negative block dimension", offset);
    const std::uint64_t need = offset + 8 * std::uint64_t(rows) * std::uint64_t(cols);
    if (need > bytes.size()) throw FormatError("truncated block '" + b.at("name").get<std::string>() + "'", bytes.size());
    Mat m(rows, cols);
    const unsigned char* p = bytes.data() + offset;
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j, p += 8) m(i, j) = get_le(p);
    out.blocks.emplace_back(b.at("name").get<std::string>(), std::move(m));
  }
  return out;
}

void save_trajectory(const fs::path& stem, const Traj& traj) {
  traj.validate();
  BlockFile f;
  f.kind = "trajectory";
  json present = json::array();
  if (traj.has_latents()) present.push_back("latents");
  if (traj.has_observations()) present.push_back("observations");
  if (traj.has_inputs()) present.push_back("inputs");
  f.meta = {{"T", traj.length()},
            {"M", traj.latents.cols()},
            {"N", traj.observations.cols()},
            {"K", traj.inputs.cols()},
            {"dt", traj.dt},
            {"fields_present", present}};
  if (traj.has_latents()) f.blocks.emplace_back("latents", traj.latents);
  if (traj.has_observations()) f.blocks.emplace_back("observations", traj.observations);
  if (traj.has_inputs()) f.blocks.emplace_back("inputs", traj.inputs);
  write_block_file(stem, f);
}

Traj load_trajectory(const fs::path& stem) {
  BlockFile f = read_block_file(stem);
  if (f.kind != "trajectory") throw FormatError("expected a trajectory file, found '" + f.kind + "'", 0);
  Traj t;
  t.dt = f.meta.value("dt", 1.0);
  if (f.has_block("latents")) t.latents = f.block("latents");
  if (f.has_block("observations")) t.observations = f.block("observations");
  if (f.has_block("inputs")) t.inputs = f.block("inputs");
  t.validate();
  return t;
}

void write_csv(const fs::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<double>>& rows) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw PlrnnError("cannot open " + path.string() + " for writing");
  for (std::size_t i = 0; i < header.size(); ++i) os << (i ? "," : "") << header[i];
  os << '\n';
  for (const auto& r : rows) {
    if (r.size() != header.size()) throw ShapeError("csv row width does not match header");
    for (std::size_t i = 0; i < r.size(); ++i) os << (i ? "," : "") << format_double(r[i]);
    os << '\n';
  }
}

void export_csv(const fs::path& path, const Traj& traj) {
  traj.validate();
  std::vector<std::string> header;
  for (Eigen::Index i = 0; i < traj.latents.cols(); ++i) header.push_back("z" + std::to_string(i + 1));
  for (Eigen::Index i = 0; i < traj.observations.cols(); ++i) header.push_back("x" + std::to_string(i + 1));
  for (Eigen::Index i = 0; i < traj.inputs.cols(); ++i) header.push_back("s" + std::to_string(i + 1));
  std::vector<std::vector<double>> rows(traj.length());
  for (Eigen::Index t = 0; t < traj.length(); ++t) {
    auto& r = rows[t];
    for (Eigen::Index i = 0; i < traj.latents.cols(); ++i) r.push_back(traj.latents(t, i));
    for (Eigen::Index i = 0; i < traj.observations.cols(); ++i) r.push_back(traj.observations(t, i));
    for (Eigen::Index i = 0; i < traj.inputs.cols(); ++i) r.push_back(traj.inputs(t, i));
  }
  write_csv(path, header, rows);
}

BlockFile params_to_blocks(const Params& p) {
  p.validate();
  BlockFile f;
  f.kind = "plrnn_params";
  f.meta = {{"M", p.latent_dim()},
            {"K", p.input_dim()},
            {"N", p.obs_dim()},
            {"m_reg", p.m_reg},
            {"obs_kind", to_string(p.obs_kind)}};
  f.blocks = {{"a_diag", p.a_diag},         {"w_offdiag", p.w_offdiag}, {"c_input", p.c_input},
              {"h_bias", p.h_bias},         {"sigma_diag", p.sigma_diag}, {"b_loading", p.b_loading},
              {"gamma_diag", p.gamma_diag}, {"mu0", p.mu0}};
  return f;
}

Params params_from_blocks(const BlockFile& f) {
  if (f.kind != "plrnn_params") throw FormatError("expected PLRNN parameters, found '" + f.kind + "'", 0);
  Params p;
  p.a_diag = f.block("a_diag");
  p.w_offdiag = f.block("w_offdiag");
  p.c_input = f.block("c_input");
  p.h_bias = f.block("h_bias");
  p.sigma_diag = f.block("sigma_diag");
  p.b_loading = f.block("b_loading");
  p.gamma_diag = f.block("gamma_diag");
  p.mu0 = f.block("mu0");
  p.m_reg = f.meta.value("m_reg", 0);
  p.obs_kind = obs_kind_from_string(f.meta.value("obs_kind", "linear_gaussian"));
  p.validate();
  return p;
}

BlockFile rnn_params_to_blocks(const RnnParams& p) {
  p.validate();
  BlockFile f;
  f.kind = "vanilla_rnn_params";
  f.meta = {{"M", p.hidden_dim()}, {"K", p.input_dim()}, {"N", p.obs_dim()}};
  f.blocks = {{"w", p.w}, {"c_input", p.c_input}, {"h_bias", p.h_bias}, {"b_loading", p.b_loading}};
  return f;
}

RnnParams rnn_params_from_blocks(const BlockFile& f) {
  if (f.kind != "vanilla_rnn_params") throw FormatError("expected RNN parameters, found '" + f.kind + "'", 0);
  RnnParams p;
  p.w = f.block("w");
  p.c_input = f.block("c_input");
  p.h_bias = f.block("h_bias");
  p.b_loading = f.block("b_loading");
  p.validate();
  return p;
}

void save_params(const fs::path& stem, const Params& p) { write_block_file(stem, params_to_blocks(p)); }
Params load_params(const fs::path& stem) { return params_from_blocks(read_block_file(stem)); }
void save_rnn_params(const fs::path& stem, const RnnParams& p) { write_block_file(stem, rnn_params_to_blocks(p)); }
RnnParams load_rnn_params(const fs::path& stem) { return rnn_params_from_blocks(read_block_file(stem)); }

}  // namespace plrnn
