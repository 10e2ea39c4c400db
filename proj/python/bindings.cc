#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "teaforn/checkpoint.h"
#include "teaforn/errors.h"
#include "teaforn/experiment.h"

namespace py = pybind11;
using namespace teaforn;

namespace {

RunSpec spec_from(const KeyValues &kv) {
    RunSpec spec;
    apply_key_values(kv, spec);
    spec.train.checkpoint_every = std::min(spec.train.checkpoint_every, spec.train.steps);
    return spec;
}

py::dict hypothesis(const Hypothesis &h) {
    py::dict d;
    d["tokens"] = h.tokens;
    d["log_prob"] = h.log_prob;
    d["finished"] = h.finished;
    return d;
}

// A trained model plus the spec it was built from.
struct Model {
    RunSpec spec;
    Seq2Seq<float> net;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "TeaForN seq2seq training lab";

    py::register_exception<ParameterError>(m, "ParameterError", PyExc_ValueError);
    py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
    py::register_exception<IndexError>(m, "TokenIndexError", PyExc_IndexError);

    m.def("discount_weights", &discount_weights, py::arg("n"), py::arg("lam"));
    m.def("parse_key_values", [](const std::string &text) { return parse_key_values(text); });
    m.def("default_config", [] { return to_key_values(RunSpec{}); }, "every config key with its default value");

    m.def(
        "bleu",
        [](const std::vector<Sequence> &c, const std::vector<Sequence> &r, bool smooth) {
            BleuOptions o;
            o.add_one_smoothing = smooth;
            const auto s = bleu(c, r, o);
            py::dict d;
            d["bleu"] = s.value;
            d["precisions"] = s.precisions;
            d["brevity_penalty"] = s.brevity_penalty;
            return d;
        },
        py::arg("candidates"), py::arg("references"), py::arg("smooth") = false);
    m.def("rouge", [](const std::vector<Sequence> &c, const std::vector<Sequence> &r) {
        const auto s = rouge(c, r);
        py::dict d;
        d["rouge1"] = s.rouge1.value;
        d["rouge2"] = s.rouge2.value;
        d["rougeL"] = s.rouge_l.value;
        return d;
    });
    m.def("token_accuracy", [](const std::vector<Sequence> &c, const std::vector<Sequence> &r) {
        return token_accuracy(c, r);
    });

    m.def(
        "generate_task",
        [](const std::string &kind, std::size_t vocab, std::size_t min_len, std::size_t max_len, std::uint64_t seed,
           std::size_t n, std::size_t first) {
            SyntheticTask t{parse_task_kind(kind), vocab, min_len, max_len, seed};
            std::vector<std::pair<std::vector<TokenId>, std::vector<TokenId>>> out;
            for (auto &p : generate(t, n, first)) out.emplace_back(std::move(p.source), std::move(p.target));
            return out;
        },
        py::arg("kind"), py::arg("vocab_size"), py::arg("min_length"), py::arg("max_length"), py::arg("seed"),
        py::arg("n"), py::arg("first_index") = 0);

    py::class_<Model>(m, "Model")
        .def_static(
            "load",
            [](const std::filesystem::path &path) {
                const auto ckpt = load_checkpoint(path);
                return Model{spec_from_checkpoint(ckpt), model_from_checkpoint(ckpt)};
            },
            py::arg("path"))
        .def("save",
             [](const Model &self, const std::filesystem::path &path) {
                 save_checkpoint(path, make_checkpoint(self.spec, self.net, Adam(self.spec.train.adam),
                                                       self.spec.train.steps, ""));
             })
        .def_property_readonly("config", [](const Model &self) { return to_key_values(self.spec); })
        .def_property_readonly("parameter_count", [](const Model &self) { return self.net.parameter_count(); })
        .def(
            "greedy",
            [](const Model &self, const std::vector<TokenId> &src, std::size_t max_steps) {
                py::gil_scoped_release release;
                auto h = greedy_decode(self.net, src, DecodeOptions{max_steps});
                py::gil_scoped_acquire acquire;
                return hypothesis(h);
            },
            py::arg("source"), py::arg("max_steps") = 0)
        .def(
            "beam",
            [](const Model &self, const std::vector<TokenId> &src, std::size_t k, std::size_t max_steps,
               double length_penalty) {
                std::vector<Hypothesis> hs;
                {
                    py::gil_scoped_release release;
                    hs = beam_search(self.net, src, k, DecodeOptions{max_steps, length_penalty});
                }
                py::list out;
                for (const auto &h : hs) out.append(hypothesis(h));
                return out;
            },
            py::arg("source"), py::arg("k"), py::arg("max_steps") = 0, py::arg("length_penalty") = 0.0)
        .def("score", [](const Model &self, const std::vector<TokenId> &src, const std::vector<TokenId> &tokens) {
            return score_sequence(self.net, src, tokens);
        });

    m.def(
        "train",
        [](const KeyValues &config, const std::function<void(std::uint64_t, double)> &on_step) {
            RunSpec spec = spec_from(config);
            const auto data = prepare_data(spec.data);
            TrainHooks hooks;
            if (on_step) {
                hooks.on_step = [&](std::uint64_t step, double loss) {
                    py::gil_scoped_acquire acquire;
                    on_step(step, loss);
                };
            }
            std::optional<TrainResult> result;
            {
                py::gil_scoped_release release;
                result.emplace(train(spec, data, hooks));
            }
            spec.model.vocab_size = data.vocab_size;
            py::dict d;
            d["losses"] = result->losses;
            d["seconds"] = result->seconds;
            d["model"] = Model{spec, std::move(result->model)};
            return d;
        },
        py::arg("config"), py::arg("on_step") = nullptr);

    m.def(
        "evaluate",
        [](const Model &model, const std::vector<std::pair<std::vector<TokenId>, std::vector<TokenId>>> &pairs,
           const std::vector<std::size_t> &beams, const std::vector<std::string> &metrics) {
            std::vector<SequencePair> sp;
            for (const auto &[s, t] : pairs) sp.push_back({s, t});
            std::vector<EvalRow> rows;
            {
                py::gil_scoped_release release;
                rows = evaluate(model.net, sp, beams, metrics);
            }
            py::list out;
            for (const auto &r : rows) out.append(py::make_tuple(r.k, r.metric, r.value));
            return out;
        },
        py::arg("model"), py::arg("pairs"), py::arg("beams") = std::vector<std::size_t>{1},
        py::arg("metrics") = std::vector<std::string>{"bleu"});
}
