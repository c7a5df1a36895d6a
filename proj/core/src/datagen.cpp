#include "hypa/datagen.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace hypa {

void GenParams::validate() const {
  require(seq_len >= 1, Err::kBadArgument, "seq_len must be >= 1");
  require(vocab_size >= 6, Err::kBadArgument, "vocab_size too small");
  require(n_task_tokens >= 2 && n_task_tokens % 2 == 0, Err::kBadArgument,
          "n_task_tokens must be an even count >= 2");
  require(n_conf_tokens >= 2 && n_conf_tokens % 2 == 0, Err::kBadArgument,
          "n_conf_tokens must be an even count >= 2");
  require(n_noise_tokens >= 1, Err::kBadArgument,
          "n_noise_tokens must be >= 1");
  require(n_task_tokens + n_conf_tokens + n_noise_tokens == usable_vocab(),
          Err::kBadArgument,
          "token groups must partition the usable vocabulary exactly");
  require(p_task_emit >= 0.0 && p_conf_emit >= 0.0 &&
              p_task_emit + p_conf_emit <= 1.0,
          Err::kBadArgument, "emission probabilities must satisfy "
                             "p_task_emit + p_conf_emit <= 1");
  require(p_y1 > 0.0 && p_y1 < 1.0 && p_z1 > 0.0 && p_z1 < 1.0,
          Err::kBadArgument, "marginals must lie strictly inside (0, 1)");
}

TokenId GenParams::task_group_begin(int y) const {
  return static_cast<TokenId>(y == 0 ? 0 : n_task_tokens / 2);
}

TokenId GenParams::conf_group_begin(int z) const {
  return static_cast<TokenId>(n_task_tokens + (z == 0 ? 0 : n_conf_tokens / 2));
}

TokenId GenParams::noise_group_begin() const {
  return static_cast<TokenId>(n_task_tokens + n_conf_tokens);
}

std::pair<double, double> conditional_from_alpha(double alpha, double p_y1,
                                                 double p_z1) {
  require(alpha > 0.0 && std::isfinite(alpha), Err::kInfeasibleAlpha,
          "alpha must be a positive finite real");
  require(p_y1 > 0.0 && p_y1 < 1.0, Err::kBadArgument, "p_y1 outside (0,1)");
  require(p_z1 > 0.0 && p_z1 < 1.0, Err::kBadArgument, "p_z1 outside (0,1)");
  const double p0 = p_y1 / ((1.0 - p_z1) + alpha * p_z1);
  const double p1 = alpha * p0;
  if (!(p0 >= 0.0 && p0 <= 1.0 && p1 >= 0.0 && p1 <= 1.0)) {
    fail(Err::kInfeasibleAlpha,
         "alpha=" + format_double(alpha) + " gives conditionals (" +
             format_double(p0) + ", " + format_double(p1) +
             ") outside [0,1] for the requested marginals");
  }
  return {p0, p1};
}

TokenSequence render_tokens(int y, int z, const GenParams& params, Rng& rng) {
  params.validate();
  TokenSequence tokens(static_cast<std::size_t>(params.seq_len));
  for (int i = 0; i < params.seq_len; ++i) {
    const double u = rng.uniform();
    TokenId t;
    if (u < params.p_task_emit) {
      t = params.task_group_begin(y) +
          static_cast<TokenId>(rng.below(params.task_group_size()));
    } else if (u < params.p_task_emit + params.p_conf_emit) {
      t = params.conf_group_begin(z) +
          static_cast<TokenId>(rng.below(params.conf_group_size()));
    } else {
      t = params.noise_group_begin() +
          static_cast<TokenId>(rng.below(params.n_noise_tokens));
    }
    tokens[static_cast<std::size_t>(i)] = t;
  }
  return tokens;
}

ConfoundedDataset sample_dataset(double alpha, int n, const GenParams& params,
                                 std::uint64_t seed) {
  params.validate();
  require(n >= 1, Err::kBadArgument, "dataset size must be >= 1");
  const auto [p0, p1] = conditional_from_alpha(alpha, params.p_y1, params.p_z1);

  ConfoundedDataset ds;
  ds.alpha = alpha;
  ds.gen_params = params;
  ds.seed = seed;
  ds.examples.reserve(static_cast<std::size_t>(n));
  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    ConfoundedExample ex;
    ex.z = rng.bernoulli(params.p_z1) ? 1 : 0;
    ex.y = rng.bernoulli(ex.z == 1 ? p1 : p0) ? 1 : 0;
    ex.tokens = render_tokens(ex.y, ex.z, params, rng);
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

std::vector<double> make_test_grid(double a_min, double a_max, int k) {
  require(a_min > 0.0 && a_max > 0.0, Err::kBadArgument,
          "grid bounds must be positive");
  require(a_min < a_max, Err::kBadArgument,
          "grid requires a_min < a_max");
  require(k >= 2, Err::kBadArgument, "grid requires k >= 2");
  std::vector<double> grid(static_cast<std::size_t>(k));
  const double lo = std::log10(a_min);
  const double hi = std::log10(a_max);
  for (int i = 0; i < k; ++i) {
    grid[static_cast<std::size_t>(i)] =
        std::pow(10.0, lo + (hi - lo) * i / (k - 1));
  }
  grid.front() = a_min;  // exact endpoints
  grid.back() = a_max;
  for (int i = 1; i < k; ++i) {
    require(grid[i] > grid[i - 1], Err::kBadArgument,
            "grid must be strictly increasing");
  }
  return grid;
}

void write_dataset(const ConfoundedDataset& ds, std::ostream& out) {
  out << "#HYPD v1 alpha=" << format_double(ds.alpha) << " seed=" << ds.seed
      << " n=" << ds.examples.size() << "\n";
  for (const auto& ex : ds.examples) {
    out << ex.y << ' ' << ex.z;
    for (TokenId t : ex.tokens) out << ' ' << t;
    out << "\n";
  }
}

ConfoundedDataset read_dataset(std::istream& in) {
  std::string header;
  require(static_cast<bool>(std::getline(in, header)), Err::kCorruptFile,
          "dataset file is empty");
  double alpha = 0.0;
  unsigned long long seed = 0;
  unsigned long long n = 0;
  const int matched = std::sscanf(header.c_str(),
                                  "#HYPD v1 alpha=%lf seed=%llu n=%llu",
                                  &alpha, &seed, &n);
  require(matched == 3, Err::kCorruptFile, "bad dataset header: " + header);

  ConfoundedDataset ds;
  ds.alpha = alpha;
  ds.seed = seed;
  ds.examples.reserve(n);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    ConfoundedExample ex;
    require(static_cast<bool>(ls >> ex.y >> ex.z), Err::kCorruptFile,
            "bad dataset record: " + line);
    TokenId t;
    while (ls >> t) ex.tokens.push_back(t);
    require(!ex.tokens.empty(), Err::kCorruptFile,
            "dataset record has no tokens: " + line);
    ds.examples.push_back(std::move(ex));
  }
  require(ds.examples.size() == n, Err::kCorruptFile,
          "dataset record count does not match header");
  ds.gen_params.seq_len = static_cast<int>(ds.examples.front().tokens.size());
  return ds;
}

void save_dataset(const ConfoundedDataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), Err::kIo, "cannot open for write: " + path);
  write_dataset(ds, out);
  require(out.good(), Err::kIo, "write failed: " + path);
}

ConfoundedDataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), Err::kIo, "cannot open: " + path);
  return read_dataset(in);
}

}  // namespace hypa
