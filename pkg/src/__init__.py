from src.latent_domain_transfer.pipeline import main
