// Binary containers, token streams, checkpoints, and flat key = value configs.

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "otok/generation.hpp"
#include "otok/training.hpp"

namespace otok {

class FormatError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

using Bytes = std::vector<std::uint8_t>;

Bytes read_file(const std::filesystem::path& path);
// Writes to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const Bytes& data);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

// "OTSR" container: version u16, dtype u8 (0 = f32), ndim u8, u32 dims, f32 payload; little-endian.
Bytes encode_tensor(const Tensor& t);
Tensor decode_tensor(const Bytes& data);
void write_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor(const std::filesystem::path& path);

// "OTTK" stream: version u16, codebook_size u32, temporal/height/width u16,
// condition u32 (0xFFFFFFFF = none), then u16 ids when K <= 65536, else u32.
struct TokenFile {
    TokenGrid grid;  // batch 1
    std::int64_t codebook_size = 0;
    std::optional<std::int64_t> condition;
};

constexpr std::uint32_t kNoCondition = 0xFFFFFFFFu;

Bytes encode_tokens(const TokenFile& tf);
TokenFile decode_tokens(const Bytes& data);
void write_tokens(const std::filesystem::path& path, const TokenFile& tf);
TokenFile read_tokens(const std::filesystem::path& path);

// "OTCK" checkpoint: version u16, u32 header length, JSON header, then f64
// tensors in header order. The header carries `meta` plus a tensor index.
struct Checkpoint {
    nlohmann::json meta = nlohmann::json::object();
    std::map<std::string, Tensor> tensors;
};

Bytes encode_checkpoint(const Checkpoint& ck);
Checkpoint decode_checkpoint(const Bytes& data);
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint read_checkpoint(const std::filesystem::path& path);

nlohmann::json to_json(const TokenizerConfig& cfg);
TokenizerConfig tokenizer_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const LmConfig& cfg);
LmConfig lm_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const DenoiserConfig& cfg);
DenoiserConfig denoiser_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Rng& rng);
Rng rng_from_json(const nlohmann::json& j);

// Parameters, optimizer moments ("optim.first."/"optim.second." prefixes) and step counters.
void store_params(Checkpoint& ck, const nn::ParamStore& params);
void load_params(const Checkpoint& ck, nn::ParamStore& params);
void store_optimizer(Checkpoint& ck, const OptimState& opt);
OptimState load_optimizer(const Checkpoint& ck);

struct TokenizerCheckpoint {
    std::unique_ptr<TokenizerModel> model;
    std::optional<OptimState> optimizer;
    nlohmann::json extra;
};

void save_tokenizer(const std::filesystem::path& path, const TokenizerModel& model, const OptimState* opt = nullptr,
                    const nlohmann::json& extra = nlohmann::json::object());
TokenizerCheckpoint load_tokenizer(const std::filesystem::path& path);

void save_lm(const std::filesystem::path& path, const TokenLm& lm);
std::unique_ptr<TokenLm> load_lm(const std::filesystem::path& path);

void save_denoiser(const std::filesystem::path& path, const Denoiser& model, const DiffusionConfig& dc,
                   Real latent_scale);
struct DenoiserCheckpoint {
    std::unique_ptr<Denoiser> model;
    DiffusionConfig diffusion;
    Real latent_scale = 1.0;
};
DenoiserCheckpoint load_denoiser(const std::filesystem::path& path);

// Flat `key = value` configuration with `#` comments. Accessors record every
// key read (with its default when absent) so the resolved set can be written out.
class Config {
public:
    static Config parse(std::istream& in, const std::string& source = "<config>");
    static Config load(const std::filesystem::path& path);

    void set(const std::string& key, const std::string& value);
    bool has(const std::string& key) const { return values_.count(key) != 0; }

    std::string text(const std::string& key, const std::string& fallback);
    std::int64_t integer(const std::string& key, std::int64_t fallback);
    Real real(const std::string& key, Real fallback);
    bool flag(const std::string& key, bool fallback);
    std::vector<std::int64_t> integers(const std::string& key, const std::vector<std::int64_t>& fallback);

    // Throws ConfigError naming keys that were set but never read.
    void reject_unknown() const;
    // Every key read so far, sorted, one `key = value` per line.
    std::string resolved() const;

    // Uses OTOK_SEED from the environment as `seed` when the config leaves it unset.
    void apply_env_overrides();

private:
    std::string raw(const std::string& key, const std::string& fallback);

    std::string source_;
    std::map<std::string, std::string> values_;
    std::map<std::string, std::string> used_;
};

TokenizerConfig tokenizer_config_from(Config& cfg);
TrainOptions train_options_from(Config& cfg);
KlOptions kl_options_from(Config& cfg);

}  // namespace otok
