#include "marq/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#define TOML_EXCEPTIONS 1
#include <toml.hpp>

#include "marq/error.hpp"

namespace marq {

using nlohmann::json;

namespace {

const char* to_string(Normalization n) {
  switch (n) {
    case Normalization::global:
      return "global";
    case Normalization::frame_l2:
      return "frame_l2";
    case Normalization::none:
      return "none";
  }
  return "global";
}

Normalization parse_normalization(const std::string& s) {
  if (s == "global") return Normalization::global;
  if (s == "frame_l2") return Normalization::frame_l2;
  if (s == "none") return Normalization::none;
  fail(Errc::usage, "unknown quantizer.normalization '" + s + "'");
}

const char* to_string(MaskStrategy s) {
  return s == MaskStrategy::gaussian_noise ? "gaussian_noise" : "waveform_shuffle";
}

MaskStrategy parse_strategy(const std::string& s) {
  if (s == "gaussian_noise") return MaskStrategy::gaussian_noise;
  if (s == "waveform_shuffle") return MaskStrategy::waveform_shuffle;
  fail(Errc::usage, "unknown masking.strategy '" + s + "'");
}

const std::set<std::string> kFeatures{"mel", "cqt", "audio", "enc"};

std::vector<HeadSpec> rq_heads(std::initializer_list<const char*> features, std::uint64_t codewords) {
  std::vector<HeadSpec> heads;
  for (const char* f : features) heads.push_back(HeadSpec{f, codewords, false, {}});
  return heads;
}

// Typed reads that turn JSON type errors into config errors naming the key.
template <typename T>
T get(const json& j, const std::string& key) {
  try {
    if constexpr (std::is_same_v<T, double>) {
      require(j.is_number(), Errc::usage, "config key '" + key + "' must be a number");
    } else if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
      require(j.is_number_integer(), Errc::usage, "config key '" + key + "' must be an integer");
      if constexpr (std::is_unsigned_v<T>) {
        require(j.get<std::int64_t>() >= 0 || j.is_number_unsigned(), Errc::usage,
                "config key '" + key + "' must be non-negative");
      }
    }
    return j.get<T>();
  } catch (const json::exception& e) {
    fail(Errc::usage, "config key '" + key + "': " + e.what());
  }
}

Rational get_rate(const json& j, const std::string& key) {
  try {
    if (j.is_string()) return Rational::parse(j.get<std::string>());
    require(j.is_number(), Errc::usage, "config key '" + key + "' must be a rate");
    return Rational::from_double(j.get<double>());
  } catch (const Error& e) {
    fail(Errc::usage, "config key '" + key + "': " + e.what());
  }
}

// Walks an object, handing each key to `fn`; fn returns false for unknown keys.
template <typename Fn>
void each(const json& obj, const std::string& prefix, Fn&& fn) {
  require(obj.is_object(), Errc::usage, "config section '" + prefix + "' must be a table");
  for (const auto& [k, v] : obj.items()) {
    const std::string path = prefix.empty() ? k : prefix + "." + k;
    require(fn(k, v, path), Errc::usage, "unknown config key '" + path + "'");
  }
}

HeadSpec parse_head(const json& j, const std::string& prefix) {
  HeadSpec h;
  each(j, prefix, [&](const std::string& k, const json& v, const std::string& p) {
    if (k == "feature") h.feature = get<std::string>(v, p);
    else if (k == "codewords") h.codewords = get<std::uint64_t>(v, p);
    else if (k == "fsq") h.fsq = get<bool>(v, p);
    else if (k == "fsq_channels") h.fsq_config.channels = get<std::size_t>(v, p);
    else if (k == "fsq_levels") h.fsq_config.levels = get<std::size_t>(v, p);
    else return false;
    return true;
  });
  return h;
}

json toml_to_json(const toml::node& node) {
  if (const auto* t = node.as_table()) {
    json out = json::object();
    for (const auto& [k, v] : *t) out[std::string(k.str())] = toml_to_json(v);
    return out;
  }
  if (const auto* a = node.as_array()) {
    json out = json::array();
    for (const auto& v : *a) out.push_back(toml_to_json(v));
    return out;
  }
  if (const auto* v = node.as_integer()) return v->get();
  if (const auto* v = node.as_floating_point()) return v->get();
  if (const auto* v = node.as_boolean()) return v->get();
  if (const auto* v = node.as_string()) return v->get();
  fail(Errc::usage, "unsupported TOML value type (dates and times are not config values)");
}

}  // namespace

std::vector<std::string> preset_names() {
  return {"base", "multi-codebook", "multi-feature", "high-rate", "high-rate-fsq", "desk"};
}

PipelineConfig preset_config(const std::string& name) {
  PipelineConfig c;
  c.preset = name;
  if (name == "desk") {
    c.quantizer.heads = rq_heads({"mel"}, 256);
  } else if (name == "base") {
    c.quantizer.heads = rq_heads({"mel"}, 8192);
  } else if (name == "multi-codebook") {
    c.quantizer.heads = rq_heads({"mel", "mel", "mel", "mel"}, 8192);
  } else if (name == "multi-feature" || name == "high-rate" || name == "high-rate-fsq") {
    c.input_feature = "audio";
    c.frame_rate = name == "multi-feature" ? Rational{75, 4} : Rational{25, 1};
    c.quantizer.heads = rq_heads({"enc", "mel", "cqt", "audio"}, 8192);
    if (name == "high-rate-fsq") {
      for (auto& h : c.quantizer.heads) {
        h.fsq = true;
        h.fsq_config = FsqConfig{5, 6};
      }
    }
  } else {
    std::string known;
    for (const auto& n : preset_names()) known += (known.empty() ? "" : ", ") + n;
    fail(Errc::usage, "unknown preset '" + name + "' (known: " + known + ")");
  }
  c.resolve();
  return c;
}

std::size_t feature_dims(const PipelineConfig& cfg, const std::string& feature) {
  if (feature == "mel") return cfg.mel.n_mels;
  if (feature == "cqt") return cfg.cqt.n_bins;
  if (feature == "audio") return cfg.audio_patches.patch_len;
  if (feature == "enc") return cfg.enc_dims;
  fail(Errc::usage, "unknown feature '" + feature + "' (known: mel, cqt, audio, enc)");
}

std::vector<std::string> PipelineConfig::feature_names() const {
  std::vector<std::string> names{input_feature};
  for (const auto& h : quantizer.heads) {
    if (std::find(names.begin(), names.end(), h.feature) == names.end()) names.push_back(h.feature);
  }
  return names;
}

void PipelineConfig::resolve() {
  try {
    require(supported_sample_rate(sample_rate), Errc::invalid_argument,
            "unsupported sample_rate " + std::to_string(sample_rate));
    require(frame_rate.positive(), Errc::invalid_argument, "frame_rate must be positive");
    require(!quantizer.heads.empty(), Errc::invalid_argument, "quantizer needs at least one head");
    require(quantizer.proj_dims > 0, Errc::invalid_argument, "quantizer.proj_dims must be positive");
    mel.validate(sample_rate);
    cqt.validate(sample_rate);
    require(audio_patches.patch_len > 0 && audio_patches.hop > 0, Errc::invalid_argument,
            "audio patch length and hop must be positive");
    encoder.input_dims = feature_dims(*this, input_feature);
    encoder.vocab_sizes.clear();
    for (const auto& h : quantizer.heads) {
      feature_dims(*this, h.feature);
      if (h.fsq) {
        h.fsq_config.validate();
        encoder.vocab_sizes.push_back(h.fsq_config.vocab());
      } else {
        require(h.codewords > 0, Errc::invalid_argument, "quantizer head needs codewords > 0");
        encoder.vocab_sizes.push_back(h.codewords);
      }
    }
    require(masking.fraction > 0.0 && masking.fraction <= 1.0, Errc::invalid_argument,
            "masking.fraction must be in (0, 1]");
    require(masking.chunk_seconds > 0.0, Errc::invalid_argument, "masking.chunk_seconds must be positive");
    require(masking.noise_std >= 0.0, Errc::invalid_argument, "masking.noise_std must be non-negative");
    encoder.validate();
    train.validate();
    probe.validate();
  } catch (const Error& e) {
    if (e.code() == Errc::usage) throw;
    fail(Errc::usage, std::string("invalid config: ") + e.what());
  }
}

void apply_overrides(PipelineConfig& c, const json& overrides) {
  each(overrides, "", [&](const std::string& k, const json& v, const std::string& p) {
    if (k == "preset") {
      // Handled by the loader; only a consistency check here.
      require(get<std::string>(v, p) == c.preset, Errc::usage, "preset must be applied before overrides");
    } else if (k == "seed") {
      c.seed = get<std::uint64_t>(v, p);
    } else if (k == "sample_rate") {
      c.sample_rate = get<std::uint32_t>(v, p);
    } else if (k == "frame_rate") {
      c.frame_rate = get_rate(v, p);
    } else if (k == "input_feature") {
      c.input_feature = get<std::string>(v, p);
      require(kFeatures.count(c.input_feature) > 0, Errc::usage, "unknown input_feature '" + c.input_feature + "'");
    } else if (k == "enc_cache") {
      c.enc_cache = get<std::string>(v, p);
    } else if (k == "features") {
      each(v, p, [&](const std::string& k2, const json& v2, const std::string& p2) {
        if (k2 == "enc_dims") {
          c.enc_dims = get<std::size_t>(v2, p2);
        } else if (k2 == "mel") {
          each(v2, p2, [&](const std::string& k3, const json& v3, const std::string& p3) {
            if (k3 == "n_fft") c.mel.n_fft = get<std::size_t>(v3, p3);
            else if (k3 == "hop") c.mel.hop = get<std::size_t>(v3, p3);
            else if (k3 == "n_mels") c.mel.n_mels = get<std::size_t>(v3, p3);
            else if (k3 == "fmin") c.mel.fmin = get<double>(v3, p3);
            else if (k3 == "fmax") c.mel.fmax = get<double>(v3, p3);
            else if (k3 == "log_floor") c.mel.log_floor = get<double>(v3, p3);
            else return false;
            return true;
          });
        } else if (k2 == "cqt") {
          each(v2, p2, [&](const std::string& k3, const json& v3, const std::string& p3) {
            if (k3 == "fmin") c.cqt.fmin = get<double>(v3, p3);
            else if (k3 == "bins_per_octave") c.cqt.bins_per_octave = get<std::size_t>(v3, p3);
            else if (k3 == "n_bins") c.cqt.n_bins = get<std::size_t>(v3, p3);
            else if (k3 == "hop") c.cqt.hop = get<std::size_t>(v3, p3);
            else if (k3 == "log_floor") c.cqt.log_floor = get<double>(v3, p3);
            else return false;
            return true;
          });
        } else if (k2 == "audio") {
          each(v2, p2, [&](const std::string& k3, const json& v3, const std::string& p3) {
            if (k3 == "patch_len") c.audio_patches.patch_len = get<std::size_t>(v3, p3);
            else if (k3 == "hop") c.audio_patches.hop = get<std::size_t>(v3, p3);
            else return false;
            return true;
          });
        } else {
          return false;
        }
        return true;
      });
    } else if (k == "quantizer") {
      each(v, p, [&](const std::string& k2, const json& v2, const std::string& p2) {
        if (k2 == "proj_dims") {
          c.quantizer.proj_dims = get<std::size_t>(v2, p2);
        } else if (k2 == "normalization") {
          c.quantizer.normalization = parse_normalization(get<std::string>(v2, p2));
        } else if (k2 == "heads") {
          require(v2.is_array() && !v2.empty(), Errc::usage, "quantizer.heads must be a non-empty array");
          c.quantizer.heads.clear();
          for (std::size_t i = 0; i < v2.size(); ++i) {
            c.quantizer.heads.push_back(parse_head(v2[i], p2 + "[" + std::to_string(i) + "]"));
          }
        } else {
          return false;
        }
        return true;
      });
    } else if (k == "masking") {
      each(v, p, [&](const std::string& k2, const json& v2, const std::string& p2) {
        if (k2 == "chunk_seconds") c.masking.chunk_seconds = get<double>(v2, p2);
        else if (k2 == "fraction") c.masking.fraction = get<double>(v2, p2);
        else if (k2 == "strategy") c.masking.strategy = parse_strategy(get<std::string>(v2, p2));
        else if (k2 == "noise_std") c.masking.noise_std = get<double>(v2, p2);
        else return false;
        return true;
      });
    } else if (k == "encoder") {
      each(v, p, [&](const std::string& k2, const json& v2, const std::string& p2) {
        auto& e = c.encoder;
        if (k2 == "layers") e.layers = get<std::size_t>(v2, p2);
        else if (k2 == "model_dims") e.model_dims = get<std::size_t>(v2, p2);
        else if (k2 == "heads") e.heads = get<std::size_t>(v2, p2);
        else if (k2 == "conv_kernel") e.conv_kernel = get<std::size_t>(v2, p2);
        else if (k2 == "ffn_expansion") e.ffn_expansion = get<double>(v2, p2);
        else if (k2 == "dropout") e.dropout = get<double>(v2, p2);
        else if (k2 == "deepnorm_alpha") e.deepnorm_alpha = get<double>(v2, p2);
        else if (k2 == "deepnorm_beta") e.deepnorm_beta = get<double>(v2, p2);
        else if (k2 == "init_std") e.init_std = get<double>(v2, p2);
        else if (k2 == "rope_base") e.rope_base = get<double>(v2, p2);
        // Derived by resolve(); accepted so that echoed configs load back.
        else if (k2 == "input_dims" || k2 == "vocab_sizes") return true;
        else return false;
        return true;
      });
    } else if (k == "train") {
      each(v, p, [&](const std::string& k2, const json& v2, const std::string& p2) {
        auto& t = c.train;
        if (k2 == "steps") t.steps = get<std::uint64_t>(v2, p2);
        else if (k2 == "warmup_steps") t.warmup_steps = get<std::uint64_t>(v2, p2);
        else if (k2 == "max_lr") t.max_lr = get<double>(v2, p2);
        else if (k2 == "weight_decay") t.weight_decay = get<double>(v2, p2);
        else if (k2 == "batch_size") t.batch_size = get<std::size_t>(v2, p2);
        else if (k2 == "segment_seconds") t.segment_seconds = get<double>(v2, p2);
        else if (k2 == "clip_norm") t.clip_norm = get<double>(v2, p2);
        else if (k2 == "log_every") t.log_every = get<std::uint64_t>(v2, p2);
        else return false;
        return true;
      });
    } else if (k == "probe") {
      each(v, p, [&](const std::string& k2, const json& v2, const std::string& p2) {
        auto& q = c.probe;
        if (k2 == "task") q.task = parse_task_kind(get<std::string>(v2, p2));
        else if (k2 == "hidden_units") q.hidden_units = get<std::size_t>(v2, p2);
        else if (k2 == "layer_index") q.layer_index = get<std::int64_t>(v2, p2);
        else if (k2 == "epochs") q.epochs = get<std::size_t>(v2, p2);
        else if (k2 == "lr") q.lr = get<double>(v2, p2);
        else if (k2 == "batch_size") q.batch_size = get<std::size_t>(v2, p2);
        else if (k2 == "weight_decay") q.weight_decay = get<double>(v2, p2);
        else if (k2 == "threshold") q.threshold = get<double>(v2, p2);
        else if (k2 == "min_gap") q.min_gap = get<double>(v2, p2);
        else if (k2 == "tolerance") q.tolerance = get<double>(v2, p2);
        else return false;
        return true;
      });
    } else {
      return false;
    }
    return true;
  });
}

PipelineConfig config_from_json(const json& j) {
  require(j.is_object(), Errc::usage, "config must be an object");
  const std::string preset = j.contains("preset") ? get<std::string>(j.at("preset"), "preset") : "desk";
  PipelineConfig c = preset_config(preset);
  apply_overrides(c, j);
  c.resolve();
  return c;
}

json toml_text_to_json(const std::string& text) {
  toml::table table;
  try {
    table = toml::parse(text);
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << "TOML parse error at line " << e.source().begin.line << ": " << e.description();
    fail(Errc::usage, msg.str());
  }
  return toml_to_json(table);
}

PipelineConfig parse_config_toml(const std::string& text) { return config_from_json(toml_text_to_json(text)); }

json load_config_json(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), Errc::usage, "cannot open config '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return toml_text_to_json(ss.str());
  } catch (const Error& e) {
    fail(e.code(), path.string() + ": " + e.what());
  }
}

PipelineConfig load_config(const std::filesystem::path& path) {
  const json j = load_config_json(path);
  try {
    return config_from_json(j);
  } catch (const Error& e) {
    fail(e.code(), path.string() + ": " + e.what());
  }
}

json to_json(const PipelineConfig& c) {
  json heads = json::array();
  for (const auto& h : c.quantizer.heads) {
    heads.push_back({{"feature", h.feature},
                     {"codewords", h.codewords},
                     {"fsq", h.fsq},
                     {"fsq_channels", h.fsq_config.channels},
                     {"fsq_levels", h.fsq_config.levels}});
  }
  const auto& e = c.encoder;
  const auto& t = c.train;
  const auto& q = c.probe;
  return {
      {"preset", c.preset},
      {"seed", c.seed},
      {"sample_rate", c.sample_rate},
      {"frame_rate", c.frame_rate.str()},
      {"input_feature", c.input_feature},
      {"enc_cache", c.enc_cache},
      {"features",
       {{"enc_dims", c.enc_dims},
        {"mel",
         {{"n_fft", c.mel.n_fft},
          {"hop", c.mel.hop},
          {"n_mels", c.mel.n_mels},
          {"fmin", c.mel.fmin},
          {"fmax", c.mel.fmax},
          {"log_floor", c.mel.log_floor}}},
        {"cqt",
         {{"fmin", c.cqt.fmin},
          {"bins_per_octave", c.cqt.bins_per_octave},
          {"n_bins", c.cqt.n_bins},
          {"hop", c.cqt.hop},
          {"log_floor", c.cqt.log_floor}}},
        {"audio", {{"patch_len", c.audio_patches.patch_len}, {"hop", c.audio_patches.hop}}}}},
      {"quantizer",
       {{"proj_dims", c.quantizer.proj_dims},
        {"normalization", to_string(c.quantizer.normalization)},
        {"heads", heads}}},
      {"masking",
       {{"chunk_seconds", c.masking.chunk_seconds},
        {"fraction", c.masking.fraction},
        {"strategy", to_string(c.masking.strategy)},
        {"noise_std", c.masking.noise_std}}},
      {"encoder",
       {{"input_dims", e.input_dims},
        {"layers", e.layers},
        {"model_dims", e.model_dims},
        {"heads", e.heads},
        {"conv_kernel", e.conv_kernel},
        {"ffn_expansion", e.ffn_expansion},
        {"dropout", e.dropout},
        {"deepnorm_alpha", e.deepnorm_alpha},
        {"deepnorm_beta", e.deepnorm_beta},
        {"init_std", e.init_std},
        {"rope_base", e.rope_base},
        {"vocab_sizes", e.vocab_sizes}}},
      {"train",
       {{"steps", t.steps},
        {"warmup_steps", t.warmup_steps},
        {"max_lr", t.max_lr},
        {"weight_decay", t.weight_decay},
        {"batch_size", t.batch_size},
        {"segment_seconds", t.segment_seconds},
        {"clip_norm", t.clip_norm},
        {"log_every", t.log_every}}},
      {"probe",
       {{"task", to_string(q.task)},
        {"hidden_units", q.hidden_units},
        {"layer_index", q.layer_index},
        {"epochs", q.epochs},
        {"lr", q.lr},
        {"batch_size", q.batch_size},
        {"weight_decay", q.weight_decay},
        {"threshold", q.threshold},
        {"min_gap", q.min_gap},
        {"tolerance", q.tolerance}}},
  };
}

}  // namespace marq
