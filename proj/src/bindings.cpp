#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstdint>
#include <string>
#include <vector>

#include "dsm/metrics.hpp"
#include "dsm/synth.hpp"
#include "dsm/tape.hpp"
#include "dsm/text.hpp"
#include "dsm/train.hpp"

namespace py = pybind11;

namespace {

std::vector<double> py_masked_softmax(const std::vector<double>& scores,
                                      const std::vector<bool>& mask) {
  dsm::ad::Tape tape;
  dsm::ad::Tensor t({scores.size()}, scores);
  dsm::ad::Mask m(mask.begin(), mask.end());
  dsm::ad::NodeId out = tape.masked_softmax(tape.constant(t), m);
  return tape.value(out).values;
}

py::dict py_micro_gradcheck(std::uint64_t seed) {
  dsm::train::MicroGradCheck r = dsm::train::micro_gradcheck(seed);
  py::dict d;
  d["max_rel_err"] = r.report.max_rel_err;
  d["worst_param"] = r.report.worst_param;
  d["worst_coord"] = r.report.worst_coord;
  d["coords_checked"] = r.report.coords_checked;
  d["seconds"] = r.seconds;
  return d;
}

py::dict py_generate_corpus(std::uint64_t seed, std::size_t n_searches, std::size_t n_queries) {
  dsm::synth::GeneratorConfig cfg;
  cfg.seed = seed;
  cfg.n_searches = n_searches;
  cfg.n_queries = n_queries;
  dsm::synth::GeneratedCorpus corpus = dsm::synth::generate_corpus(cfg);
  py::dict d;
  d["n_train"] = corpus.train.size();
  d["n_valid"] = corpus.valid.size();
  d["n_test"] = corpus.test.size();
  d["mean_relevance"] = corpus.mean_relevance;
  d["bayes_auc_bound"] = corpus.bayes_auc;
  d["bias_true"] = corpus.bias_true;
  return d;
}

}  // namespace

PYBIND11_MODULE(dsm, m) {
  m.doc() = "query-ad matching model: core operations";
  m.attr("__version__") = "0.1.0";

  m.def("normalize_text", &dsm::text::normalize_text,
        "Lowercase, strip punctuation to spaces, split on whitespace.", py::arg("text"));
  m.def(
      "auc",
      [](const std::vector<double>& scores, const std::vector<double>& labels) {
        return dsm::metrics::auc(scores, labels);
      },
      "ROC AUC with tie handling; raises ValueError on single-class input.", py::arg("scores"),
      py::arg("labels"));
  m.def(
      "wilcoxon_signed_rank",
      [](const std::vector<double>& a, const std::vector<double>& b) {
        dsm::metrics::WilcoxonResult r = dsm::metrics::wilcoxon_signed_rank(a, b);
        py::dict d;
        d["w"] = r.w;
        d["p"] = r.p;
        d["n"] = r.n;
        return d;
      },
      "Paired two-sided test; zero differences dropped, ties mid-ranked.", py::arg("a"),
      py::arg("b"));
  m.def("masked_softmax", &py_masked_softmax,
        "Softmax over unmasked entries; masked entries get exactly 0.", py::arg("scores"),
        py::arg("mask"));
  m.def("micro_gradcheck", &py_micro_gradcheck,
        "Finite-difference audit of the full model on the micro fixture.", py::arg("seed") = 1);
  m.def("generate_corpus_summary", &py_generate_corpus,
        "Generate a synthetic corpus in memory and return its summary statistics.",
        py::arg("seed") = 1, py::arg("n_searches") = 2000, py::arg("n_queries") = 400);
}
