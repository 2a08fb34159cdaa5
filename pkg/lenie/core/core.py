import argparse
import json
import logging
import sys
from typing import List, Optional

from lenie.core.config import validate_config, list_dataset_defaults, dataset_defaults_path, LenieConfigError
from lenie.core.stages import Pipeline, STAGES, ALL, StageError, PartialAugmentationError
from lenie.kgcore.graph import KgError
from lenie.kgcore.synth import generate_synthetic_kg, DEFAULT_BETA

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.yaml"
SYNTH = "synth"
SUBCOMMANDS = STAGES + [ALL, SYNTH]

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_PIPELINE = 2
EXIT_PARTIAL_AUGMENTATION = 3


class Lenie:
    """
    Lenie command line entry
    """

    def __init__(self, argv: Optional[List[str]] = None):
        (
            self.subcommand,
            self.config_file,
            self.loglevel,
            self.arg_arm,
            self.arg_seed,
            self.arg_backend,
            self.arg_list,
            self.arg_describe,
            self.arg_nodes,
            self.arg_relations,
            self.arg_beta,
            self.arg_out
        ) = self.parse_args(argv)
        self.config = None
        self.set_logging(self.loglevel)

    def parse_args(self, argv: Optional[List[str]] = None):
        parser = argparse.ArgumentParser("lenie",
                                         description="Runs knowledge graph node importance estimation pipeline",
                                         formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        parser.add_argument("subcommand", nargs="?", choices=SUBCOMMANDS, help="Pipeline stage to run")
        parser.add_argument("-c", "--config", default=CONFIG_FILE, help="Configuration file")
        parser.add_argument("-l", "--loglevel", default="INFO", help="Set logging level",
                            choices=["CRITICAL", "ERROR", "WARNING", "INFO", "DEBUG"])
        parser.add_argument("--arm", type=str, help="Run single feature source arm")
        parser.add_argument("--seed", type=int, help="Override global seed")
        parser.add_argument("--backend", type=str, help="Name of LLM backend to use")
        defaults_group = parser.add_argument_group('Dataset defaults')
        defaults_group.add_argument("--list", action="store_true", help="List bundled dataset defaults")
        defaults_group.add_argument("--describe", type=str, metavar="NAME", help="Print bundled dataset defaults")
        synth_group = parser.add_argument_group('Synthetic dataset')
        synth_group.add_argument("--nodes", type=int, help="Entity count")
        synth_group.add_argument("--relations", type=int, help="Relation type count")
        synth_group.add_argument("--beta", type=float, default=DEFAULT_BETA, help="Planted signal slope")
        synth_group.add_argument("--out", type=str, help="Output directory")
        args = parser.parse_args(argv)

        if args.subcommand is None and not args.list and args.describe is None:
            parser.error("subcommand is required")
        # Generator parameters are required for synth
        if args.subcommand == SYNTH and (args.nodes is None or args.relations is None or args.seed is None
                                         or args.out is None):
            parser.error("--nodes, --relations, --seed and --out are required by synth")
        return (
            args.subcommand,
            args.config,
            args.loglevel,
            args.arm,
            args.seed,
            args.backend,
            args.list,
            args.describe,
            args.nodes,
            args.relations,
            args.beta,
            args.out
        )

    def list_dataset_defaults(self):
        try:
            print(f"Available dataset defaults:\n{list_dataset_defaults()}")
        except Exception as e:
            print(f"Issue discovering dataset defaults\n{str(e)}")

    def describe_dataset_defaults(self, name: str):
        try:
            filename = dataset_defaults_path(name)
            print(f"Config file: {filename}\n")
            with open(filename, 'r') as fh:
                print(fh.read())
        except Exception as e:
            print(f"Issue discovering dataset defaults\n{str(e)}")

    def set_logging(self, loglevel: str):
        """
        Configures logging
        :param loglevel: logging level for script
        """
        logging.basicConfig(format='%(asctime)s : %(levelname)s : %(message)s', level=loglevel)

    def parse_config_file(self) -> None:
        """
        Loads and validates run configuration
        :raises LenieConfigError
        """
        logger.info(f"Loading configuration from '{self.config_file}'")
        self.config = validate_config(self.config_file, seed=self.arg_seed, arm=self.arg_arm,
                                      backend=self.arg_backend)
        logger.debug(f"Normalized configuration:\n{json.dumps(self.config.echo(), indent=2)}")

    def synth(self) -> None:
        """
        Writes planted-signal dataset, no config file needed
        """
        manifest = generate_synthetic_kg(self.arg_nodes, self.arg_relations, self.arg_seed, self.arg_out,
                                         beta=self.arg_beta)
        print(json.dumps(manifest["counts"], sort_keys=True))

    def run(self) -> int:
        """
        :return: exit status
        """
        if self.arg_list:
            self.list_dataset_defaults()
            return EXIT_OK
        if self.arg_describe is not None:
            self.describe_dataset_defaults(self.arg_describe)
            return EXIT_OK
        if self.subcommand == SYNTH:
            try:
                self.synth()
            except KgError as e:
                logger.critical(f"Issue generating synthetic dataset\n{e}\n{e.__cause__}")
                return EXIT_CONFIG
            return EXIT_OK
        try:
            self.parse_config_file()
        except LenieConfigError as e:
            logger.critical(f"Error in Lenie configuration\n{e}\n{e.__cause__}")
            return EXIT_CONFIG
        try:
            Pipeline(self.config).run(self.subcommand)
        except PartialAugmentationError as e:
            logger.critical(f"Pipeline finished with failed augmentations\n{e}")
            return EXIT_PARTIAL_AUGMENTATION
        except StageError as e:
            logger.critical(f"Issue running '{self.subcommand}'\n{e}\n{e.__cause__}")
            return EXIT_PIPELINE
        return EXIT_OK


def execute(argv: Optional[List[str]] = None):
    sys.exit(Lenie(argv).run())
