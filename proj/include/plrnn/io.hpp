#pragma once

// Persistence: a flat little-endian float64 block file `<stem>.bin` with a JSON
// sidecar `<stem>.json` listing each block (name, rows, cols, byte offset),
// plus free-form metadata. Matrices are written row-major.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "plrnn/core.hpp"

namespace plrnn {

inline constexpr int kFileFormatVersion = 1;

struct BlockFile {
  std::string kind;  // "trajectory", "plrnn_params", "vanilla_rnn_params", ...
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Mat>> blocks;

  const Mat& block(const std::string& name) const;
  bool has_block(const std::string& name) const;
};

void write_block_file(const std::filesystem::path& stem, const BlockFile& file);
/// Throws FormatError on malformed or truncated files and on version mismatch.
BlockFile read_block_file(const std::filesystem::path& stem);

void save_trajectory(const std::filesystem::path& stem, const Traj& traj);
Traj load_trajectory(const std::filesystem::path& stem);

/// One row per time step; header z1..zM, x1..xN, s1..sK.
void export_csv(const std::filesystem::path& path, const Traj& traj);

BlockFile params_to_blocks(const Params& p);
Params params_from_blocks(const BlockFile& file);
BlockFile rnn_params_to_blocks(const RnnParams& p);
RnnParams rnn_params_from_blocks(const BlockFile& file);

void save_params(const std::filesystem::path& stem, const Params& p);
Params load_params(const std::filesystem::path& stem);
void save_rnn_params(const std::filesystem::path& stem, const RnnParams& p);
RnnParams load_rnn_params(const std::filesystem::path& stem);

/// Writes a CSV with the given header; every row must have header.size() entries.
void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<double>>& rows);

}  // namespace plrnn
