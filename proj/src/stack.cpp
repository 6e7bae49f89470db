#include "lorp/stack.hpp"

#include "lorp/checkpoint.hpp"
#include "lorp/util.hpp"

namespace lorp {

void save_stack(const std::filesystem::path& archive_path, const TrainedStack& stack) {
    NamedMatrices all = stack.model.params();
    for (const auto& [name, m] : stack.duration.params) all[name] = m;
    for (const auto& [name, m] : stack.frame_classifier.params) all[name] = m;
    save_matrix_archive(archive_path, all);

    const net::NetConfig& c = stack.model.config();
    std::string cfg;
    cfg += "net.feature_dim=" + std::to_string(c.feature_dim) + "\n";
    cfg += "net.model_dim=" + std::to_string(c.model_dim) + "\n";
    cfg += "net.layers=" + std::to_string(c.layers) + "\n";
    cfg += "net.heads=" + std::to_string(c.heads) + "\n";
    cfg += "net.ffn_dim=" + std::to_string(c.ffn_dim) + "\n";
    cfg += "net.token_vocab=" + std::to_string(c.token_vocab) + "\n";
    cfg += "net.time_dim=" + std::to_string(c.time_dim) + "\n";
    cfg += "dur.vocab=" + std::to_string(stack.duration.vocab) + "\n";
    cfg += "dur.emb_dim=" + std::to_string(stack.duration.emb_dim) + "\n";
    cfg += "dur.hidden_dim=" + std::to_string(stack.duration.hidden_dim) + "\n";
    cfg += "fc.feature_dim=" + std::to_string(stack.frame_classifier.feature_dim) + "\n";
    cfg += "fc.hidden_dim=" + std::to_string(stack.frame_classifier.hidden_dim) + "\n";
    cfg += "fc.vocab=" + std::to_string(stack.frame_classifier.vocab) + "\n";
    write_file(archive_path.string() + ".cfg", cfg);
}

TrainedStack load_stack(const std::filesystem::path& archive_path) {
    NamedMatrices all = load_matrix_archive(archive_path);
    KeyValueConfig cfg = KeyValueConfig::parse_file(archive_path.string() + ".cfg");

    net::NetConfig nc;
    nc.feature_dim = static_cast<int>(cfg.get_int("net.feature_dim", 0));
    nc.model_dim = static_cast<int>(cfg.get_int("net.model_dim", 0));
    nc.layers = static_cast<int>(cfg.get_int("net.layers", 0));
    nc.heads = static_cast<int>(cfg.get_int("net.heads", 0));
    nc.ffn_dim = static_cast<int>(cfg.get_int("net.ffn_dim", 0));
    nc.token_vocab = static_cast<int>(cfg.get_int("net.token_vocab", 0));
    nc.time_dim = static_cast<int>(cfg.get_int("net.time_dim", 0));

    NamedMatrices net_params, dur_params, fc_params;
    for (auto& [name, m] : all) {
        if (name.rfind("net.", 0) == 0)
            net_params[name] = std::move(m);
        else if (name.rfind("dur.", 0) == 0)
            dur_params[name] = std::move(m);
        else if (name.rfind("fc.", 0) == 0)
            fc_params[name] = std::move(m);
        else
            throw std::runtime_error("stack: unexpected tensor '" + name + "' in checkpoint");
    }

    align::DurationPredictor dp;
    dp.vocab = static_cast<int>(cfg.get_int("dur.vocab", 0));
    dp.emb_dim = static_cast<int>(cfg.get_int("dur.emb_dim", 0));
    dp.hidden_dim = static_cast<int>(cfg.get_int("dur.hidden_dim", 0));
    dp.params = std::move(dur_params);

    align::FrameClassifier fc;
    fc.feature_dim = static_cast<int>(cfg.get_int("fc.feature_dim", 0));
    fc.hidden_dim = static_cast<int>(cfg.get_int("fc.hidden_dim", 0));
    fc.vocab = static_cast<int>(cfg.get_int("fc.vocab", 0));
    fc.params = std::move(fc_params);

    return TrainedStack{net::Model(nc, std::move(net_params)), std::move(dp), std::move(fc)};
}

}  // namespace lorp
